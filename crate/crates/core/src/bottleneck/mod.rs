//! Gaussian VIB followed by grouped vector quantization.

mod codebook;
mod vib;

pub use codebook::{expressible_states, Codebook, CodebookUpdate, Quantized};
pub use vib::{kl_to_unit_gaussian, VibLayer, VibOutput, LOG_SIGMA_MAX, LOG_SIGMA_MIN};

use numcore::{Graph, ParamId, ParamStore, Real, Tensor};

use crate::Result;

/// The optional VIB and VQ stages that sit between the encoder and the
/// objectives. Either may be absent (ablation arms).
#[derive(Clone, Debug)]
pub struct Bottleneck<T> {
    pub vib: Option<VibLayer>,
    pub codebook: Option<Codebook<T>>,
}

/// Deterministic embeddings of a batch, before and after quantization.
#[derive(Clone, Debug)]
pub struct Embedded<T> {
    pub continuous: Tensor<T>,
    pub quantized: Tensor<T>,
    /// Row-major `[batch, groups]`; empty without a codebook.
    pub codes: Vec<usize>,
}

impl<T: Real> Bottleneck<T> {
    /// Width the encoder must produce for a latent of width `latent`.
    pub fn input_dim(&self, latent: usize) -> usize {
        if self.vib.is_some() {
            2 * latent
        } else {
            latent
        }
    }

    /// Inference-only pass `z -> vib_deterministic -> quantize` on raw
    /// encoder outputs. No randomness, no statistics.
    pub fn embed(&self, store: &ParamStore<T>, z: &Tensor<T>) -> Result<Embedded<T>> {
        let continuous = match &self.vib {
            Some(vib) => {
                let g = Graph::inference();
                let x = g.constant(z.clone())?;
                let y = vib.deterministic(&g, store, x)?;
                g.to_tensor(y)
            }
            None => z.clone(),
        };
        let (quantized, codes) = match &self.codebook {
            Some(cb) => cb.lookup(store, &continuous)?,
            None => (continuous.clone(), Vec::new()),
        };
        Ok(Embedded {
            continuous,
            quantized,
            codes,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        if let Some(v) = &self.vib {
            out.extend(v.params());
        }
        if let Some(cb) = &self.codebook {
            out.push(cb.codes);
        }
        out
    }

    pub fn set_frozen(&self, store: &mut ParamStore<T>, frozen: bool) {
        for id in self.params() {
            store.set_frozen(id, frozen);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    use crate::SeedRng;

    fn book(groups: usize, rows: Vec<Vec<f64>>) -> (ParamStore<f64>, Codebook<f64>) {
        let mut store = ParamStore::new();
        let cb = Codebook::from_vectors(&mut store, "vq", groups, Tensor::from_rows(&rows)).unwrap();
        (store, cb)
    }

    fn quantize_rows(cb: &mut Codebook<f64>, store: &ParamStore<f64>, rows: Vec<Vec<f64>>) -> (Vec<usize>, f64, Vec<f64>) {
        let g = Graph::new();
        let z = g.constant(Tensor::from_rows(&rows)).unwrap();
        let q = cb.quantize(&g, store, z).unwrap();
        let zq = g.value(q.z_q).data().to_vec();
        (q.codes, g.item(q.vq_loss), zq)
    }

    #[test]
    fn nearest_code_small_example() {
        let (store, mut cb) = book(1, vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        let (codes, _, zq) = quantize_rows(&mut cb, &store, vec![vec![0.1, 0.2]]);
        assert_eq!(codes, vec![0]);
        assert_eq!(zq, vec![0.0, 0.0]);
        assert_eq!(cb.usage(), &[1, 0]);
    }

    #[test]
    fn exact_code_has_zero_loss() {
        let (store, mut cb) = book(1, vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        let (codes, loss, _) = quantize_rows(&mut cb, &store, vec![vec![1.0, 1.0]]);
        assert_eq!(codes, vec![1]);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let (store, mut cb) = book(1, vec![vec![1.0], vec![-1.0], vec![1.0]]);
        let (codes, _, _) = quantize_rows(&mut cb, &store, vec![vec![0.0], vec![1.0]]);
        assert_eq!(codes, vec![0, 0]);
    }

    #[test]
    fn indivisible_width_is_a_config_error() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedRng::seed_from_u64(0);
        assert!(matches!(
            Codebook::new(&mut store, "vq", 10, 4, 3, &mut rng),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn vq_loss_matches_formula() {
        let (store, mut cb) = book(2, vec![vec![0.0], vec![2.0], vec![1.0], vec![-1.0]]);
        cb.commitment = 0.25;
        // rows: (0.5 -> code 0 @0.5, 0.2 -> code 0 @0.8), (1.5 -> code 1 @0.5, -3 -> code 1 @2)
        let (codes, loss, _) =
            quantize_rows(&mut cb, &store, vec![vec![0.5, 0.2], vec![1.5, -3.0]]);
        assert_eq!(codes, vec![0, 0, 1, 1]);
        let sq = 0.25 + 0.64 + 0.25 + 4.0;
        assert!((loss - 1.25 * sq / 2.0).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let (store, mut cb) = book(1, vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        let g = Graph::new();
        let mut input = ParamStore::new();
        let id = input.add("z", Tensor::from_rows(&[vec![0.3, 0.9]]));
        let z = g.param(&input, id).unwrap();
        let q = cb.quantize(&g, &store, z).unwrap();
        let w = g.constant(Tensor::from_rows(&[vec![2.0, -3.0]])).unwrap();
        let loss = g.sum(g.mul(q.z_q, w).unwrap()).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(z).unwrap().data(), &[2.0, -3.0]);
    }

    #[test]
    fn codebook_gradient_only_touches_selected_codes() {
        let (mut store, mut cb) = book(1, vec![vec![0.0], vec![5.0]]);
        let g = Graph::new();
        let z = g.constant(Tensor::from_rows(&[vec![1.0]])).unwrap();
        let q = cb.quantize(&g, &store, z).unwrap();
        g.backward(q.vq_loss).unwrap().accumulate_into(&mut store);
        // d/de (e - 1)^2 at e = 0 is -2.
        assert_eq!(store.grad(cb.codes).data(), &[-2.0, 0.0]);
    }

    #[test]
    fn ema_cases() {
        let (mut store, mut cb) = book(1, vec![vec![0.0, 0.0], vec![5.0, 5.0]]);
        cb.update = CodebookUpdate::Ema { decay: 0.0 };
        let z = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]);
        cb.ema_update(&mut store, &z, &[]).unwrap_err();
        let empty = Tensor::<f64>::zeros(&[0, 2]);
        cb.ema_update(&mut store, &empty, &[]).unwrap();
        assert_eq!(store.value(cb.codes).data(), &[0.0, 0.0, 5.0, 5.0]);
        cb.ema_update(&mut store, &z, &[0, 0]).unwrap();
        assert_eq!(store.value(cb.codes).data(), &[1.0, 2.0, 5.0, 5.0]);
    }

    #[test]
    fn ema_requires_ema_mode() {
        let (mut store, mut cb) = book(1, vec![vec![0.0]]);
        let z = Tensor::from_rows(&[vec![1.0]]);
        assert!(matches!(cb.ema_update(&mut store, &z, &[0]), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn ema_converges_to_cluster_centroids() {
        let mut rng = SeedRng::seed_from_u64(3);
        let centers = [[-4.0, 1.0], [3.0, -2.0]];
        let (mut store, mut cb) = book(1, vec![vec![-1.0, 0.0], vec![1.0, 0.0]]);
        cb.update = CodebookUpdate::Ema { decay: 0.9 };
        let mut all = Vec::new();
        for _ in 0..200 {
            let rows: Vec<Vec<f64>> = (0..16)
                .map(|i| {
                    let c = centers[i % 2];
                    let nx: f64 = rng.sample(StandardNormal);
                    let ny: f64 = rng.sample(StandardNormal);
                    vec![c[0] + 0.3 * nx, c[1] + 0.3 * ny]
                })
                .collect();
            let z = Tensor::from_rows(&rows);
            let (_, codes) = cb.lookup(&store, &z).unwrap();
            cb.ema_update(&mut store, &z, &codes).unwrap();
            all.extend(rows);
        }
        // Oracle: centroids of the pooled data per true cluster (k-means fixed point).
        for (k, c) in [(0, 0usize), (1, 1)] {
            let pts: Vec<&Vec<f64>> = all.iter().enumerate().filter(|(i, _)| i % 2 == c).map(|(_, p)| p).collect();
            let mx = pts.iter().map(|p| p[0]).sum::<f64>() / pts.len() as f64;
            let my = pts.iter().map(|p| p[1]).sum::<f64>() / pts.len() as f64;
            let code = cb.code(&store, 0, k);
            assert!((code[0] - mx).abs() < 0.05 && (code[1] - my).abs() < 0.05, "{code:?} vs ({mx},{my})");
        }
    }

    #[test]
    fn expressible_state_counts() {
        assert_eq!(expressible_states(50, 8), "39062500000000");
        assert_eq!(expressible_states(1, 7), "1");
        assert_eq!(expressible_states(2, 10), "1024");
        assert_eq!(expressible_states(50, 32).len(), 55);
    }

    #[test]
    fn dead_codes_are_reseeded_from_recent_segments() {
        let (mut store, mut cb) = book(1, vec![vec![0.0], vec![100.0]]);
        cb.dead_window = 3;
        let mut rng = SeedRng::seed_from_u64(0);
        for _ in 0..3 {
            quantize_rows(&mut cb, &store, vec![vec![0.1]]);
        }
        let recent = Tensor::from_rows(&[vec![7.0]]);
        assert_eq!(cb.reseed_dead(&mut store, &recent, &mut rng).unwrap(), 1);
        assert_eq!(store.value(cb.codes).data(), &[0.0, 7.0]);
    }

    #[test]
    fn init_from_data_uses_real_segments() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedRng::seed_from_u64(1);
        let mut cb = Codebook::new(&mut store, "vq", 4, 2, 5, &mut rng).unwrap();
        let z = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]);
        cb.init_from_data(&mut store, &z, &mut rng).unwrap();
        for j in 0..5 {
            let a = cb.code(&store, 0, j);
            let b = cb.code(&store, 1, j);
            assert!(a == vec![1.0, 2.0] || a == vec![5.0, 6.0]);
            assert!(b == vec![3.0, 4.0] || b == vec![7.0, 8.0]);
        }
    }

    #[test]
    fn statistics_round_trip_through_records() {
        let (store, mut cb) = book(2, vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]]);
        quantize_rows(&mut cb, &store, vec![vec![0.9, 2.2], vec![0.0, 3.0]]);
        let recs = cb.to_records("cb/");
        let (_, mut other) = book(2, vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]]);
        other.load_records("cb/", &recs).unwrap();
        assert_eq!(other.usage(), cb.usage());
        assert_eq!(other.steps(), 1);
    }

    #[test]
    fn csv_dump_has_one_row_per_code() {
        let (store, cb) = book(2, vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 2.0], vec![3.0, 3.0]]);
        let csv = cb.to_csv(&store);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "group,index,usage,v0,v1");
        assert_eq!(lines.len(), 5);
        assert!(lines[3].starts_with("1,0,0,"));
    }

    #[test]
    fn embed_without_stages_is_identity() {
        let store = ParamStore::<f64>::new();
        let b = Bottleneck::<f64> {
            vib: None,
            codebook: None,
        };
        let z = Tensor::from_rows(&[vec![0.5, -1.0]]);
        let e = b.embed(&store, &z).unwrap();
        assert_eq!(e.quantized.data(), z.data());
        assert!(e.codes.is_empty());
    }

    #[test]
    fn vib_mean_matches_sample_average() {
        // Stochastic pre-projection samples average to μ within 3 standard errors.
        let mut store = ParamStore::<f64>::new();
        let vib = VibLayer::with_identity_projection(&mut store, "vib", 2, 0.01);
        let input = Tensor::from_rows(&[vec![0.4, -1.3, 0.1, -0.6]]);
        let det = {
            let g = Graph::inference();
            let x = g.constant(input.clone()).unwrap();
            g.to_tensor(vib.deterministic(&g, &store, x).unwrap())
        };
        let n = 100_000;
        let rows = Tensor::from_rows(&vec![input.row(0).to_vec(); n]);
        let g = Graph::inference();
        let x = g.constant(rows).unwrap();
        let mut rng = SeedRng::seed_from_u64(11);
        let out = vib.forward(&g, &store, x, &mut rng).unwrap();
        let samples = g.value(out.z_hat);
        for (c, sigma) in [(0, 0.1f64.exp()), (1, (-0.6f64).exp())] {
            let mean = (0..n).map(|r| samples.get(r, c)).sum::<f64>() / n as f64;
            let se = sigma / (n as f64).sqrt();
            assert!((mean - det.get(0, c)).abs() < 3.0 * se, "col {c}: {mean}");
        }
    }
}
