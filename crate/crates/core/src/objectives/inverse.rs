use numcore::{Activation, Graph, Mlp, ParamId, ParamStore, Real, Var};
use rand::Rng;

use super::{PairBatch, RepresentationObjective};
use crate::{Error, Result};

/// Mean softmax cross-entropy of `logits: [B, A]` against `labels`.
pub fn cross_entropy<T: Real>(g: &Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, a) = g.shape(logits);
    if labels.len() != b || b == 0 {
        return Err(Error::contract(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= a) {
        return Err(Error::contract(format!("action {bad} outside {a} actions")));
    }
    let picked = g.gather_cols(g.log_softmax(logits)?, labels)?;
    Ok(g.scale(g.sum(picked)?, -1.0 / b as f64)?)
}

/// Predicts `a_t` from `[z_t | z_{t+k}]` with an MLP head.
pub struct InverseObjective {
    pub head: Mlp,
    pub max_k: usize,
    name: &'static str,
}

impl InverseObjective {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        latent: usize,
        hidden: usize,
        actions: usize,
        max_k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if max_k == 0 {
            return Err(Error::config("max_k must be at least 1"));
        }
        Ok(Self {
            head: Mlp::new(store, "inverse", &[2 * latent, hidden, actions], Activation::Relu, rng),
            max_k,
            name: if max_k == 1 { "inverse1" } else { "inverse_k" },
        })
    }
}

impl<T: Real> RepresentationObjective<T> for InverseObjective {
    fn name(&self) -> &'static str {
        self.name
    }

    fn max_k(&self) -> usize {
        self.max_k
    }

    fn loss(&self, g: &Graph<T>, store: &ParamStore<T>, batch: &PairBatch) -> Result<Var> {
        if let Some(&k) = batch.ks.iter().find(|&&k| k == 0 || k > self.max_k) {
            return Err(Error::contract(format!("k = {k} outside [1, {}]", self.max_k)));
        }
        let x = g.concat_cols(&[batch.anchor, batch.target])?;
        let logits = self.head.forward(g, store, x)?;
        cross_entropy(g, logits, &batch.actions)
    }

    fn params(&self) -> Vec<ParamId> {
        self.head.params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use numcore::Tensor;
    use rand::SeedableRng;

    #[test]
    fn uniform_logits_give_log_actions() {
        let g = Graph::<f64>::new();
        let l = g.constant(Tensor::full(&[3, 4], 0.7)).unwrap();
        let loss = g.item(cross_entropy(&g, l, &[0, 3, 2]).unwrap());
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_near_zero() {
        let g = Graph::<f64>::new();
        let l = g.constant(Tensor::from_rows(&[vec![40.0, 0.0, 0.0, 0.0]])).unwrap();
        assert!(g.item(cross_entropy(&g, l, &[0]).unwrap()) < 1e-15);
    }

    #[test]
    fn matches_direct_formula() {
        let mut rng = crate::SeedRng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let labels = [1, 0, 3, 3, 2, 1];
        let g = Graph::<f64>::new();
        let l = g.constant(Tensor::from_rows(&rows)).unwrap();
        let got = g.item(cross_entropy(&g, l, &labels).unwrap());
        let want = rows
            .iter()
            .zip(labels)
            .map(|(r, y)| r.iter().map(|x| x.exp()).sum::<f64>().ln() - r[y])
            .sum::<f64>()
            / 6.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn k_out_of_range_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = crate::SeedRng::seed_from_u64(0);
        let obj = InverseObjective::new(&mut store, 2, 4, 4, 3, &mut rng).unwrap();
        let g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 2])).unwrap();
        let batch = PairBatch {
            anchor: z,
            target: z,
            actions: vec![0],
            ks: vec![4],
        };
        assert!(RepresentationObjective::<f64>::loss(&obj, &g, &store, &batch).is_err());
    }
}
