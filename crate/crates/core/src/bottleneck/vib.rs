use numcore::{Graph, Linear, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// `log σ` is clamped into this range before exponentiation.
pub const LOG_SIGMA_MIN: f64 = -6.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;

/// Gaussian bottleneck: the input `[μ | log σ]` (width `2h`) is sampled with
/// the reparameterization trick and passed through a linear map `h -> h`.
#[derive(Clone, Debug)]
pub struct VibLayer {
    pub latent_dim: usize,
    pub projection: Linear,
    /// Weight of the KL term in the total loss.
    pub kl_weight: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct VibOutput {
    pub z_hat: Var,
    /// Batch mean of `KL(N(μ, σ²) || N(0, I))`.
    pub kl: Var,
    pub mu: Var,
    pub log_sigma: Var,
}

impl VibLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        latent_dim: usize,
        kl_weight: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            latent_dim,
            projection: Linear::new(store, &format!("{name}.proj"), latent_dim, latent_dim, rng),
            kl_weight,
        }
    }

    /// Layer whose projection starts as the identity map.
    pub fn with_identity_projection<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        latent_dim: usize,
        kl_weight: f64,
    ) -> Self {
        Self {
            latent_dim,
            projection: Linear::identity(store, &format!("{name}.proj"), latent_dim),
            kl_weight,
        }
    }

    pub fn input_dim(&self) -> usize {
        2 * self.latent_dim
    }

    pub fn params(&self) -> [ParamId; 2] {
        self.projection.params()
    }

    fn split<T: Real>(&self, g: &Graph<T>, z: Var) -> Result<(Var, Var)> {
        let (_, width) = g.shape(z);
        if width % 2 != 0 {
            return Err(Error::contract(format!("VIB input width {width} is odd")));
        }
        if width != self.input_dim() {
            return Err(Error::contract(format!(
                "VIB input width {width}, layer expects {}",
                self.input_dim()
            )));
        }
        let h = self.latent_dim;
        let mu = g.slice_cols(z, 0, h)?;
        let log_sigma = g.clamp(g.slice_cols(z, h, h)?, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
        Ok((mu, log_sigma))
    }

    /// Stochastic pass: `ẑ = f(μ + σ ⊙ ε)`, `ε ~ N(0, I)`.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        z: Var,
        rng: &mut R,
    ) -> Result<VibOutput> {
        let (mu, log_sigma) = self.split(g, z)?;
        let (rows, h) = g.shape(mu);
        let eps: Vec<T> = (0..rows * h)
            .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let eps = g.constant(Tensor::matrix(rows, h, eps)?)?;
        let sigma = g.exp(log_sigma)?;
        let sample = g.add(mu, g.mul(sigma, eps)?)?;
        let z_hat = self.projection.forward(g, store, sample)?;
        let kl = kl_to_unit_gaussian(g, mu, log_sigma)?;
        Ok(VibOutput {
            z_hat,
            kl,
            mu,
            log_sigma,
        })
    }

    /// Deterministic pass `f(μ)`; consumes no randomness and ignores σ.
    pub fn deterministic<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        let (mu, _) = self.split(g, z)?;
        Ok(self.projection.forward(g, store, mu)?)
    }
}

/// `mean_rows 0.5 Σ_i (μ_i² + σ_i² − 1 − ln σ_i²)` with `σ = exp(log σ)`.
pub fn kl_to_unit_gaussian<T: Real>(g: &Graph<T>, mu: Var, log_sigma: Var) -> Result<Var> {
    let (rows, _) = g.shape(mu);
    let mu2 = g.square(mu)?;
    let sigma2 = g.exp(g.scale(log_sigma, 2.0)?)?;
    let inner = g.sub(g.add(mu2, sigma2)?, g.scale(log_sigma, 2.0)?)?;
    let inner = g.add_scalar(inner, -1.0)?;
    Ok(g.scale(g.sum(inner)?, 0.5 / rows as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn kl_of(mu: &[f64], log_sigma: &[f64]) -> f64 {
        let g = Graph::<f64>::new();
        let m = g.constant(Tensor::from_rows(&[mu.to_vec()])).unwrap();
        let s = g.constant(Tensor::from_rows(&[log_sigma.to_vec()])).unwrap();
        g.item(kl_to_unit_gaussian(&g, m, s).unwrap())
    }

    #[test]
    fn kl_closed_form_cases() {
        assert_eq!(kl_of(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((kl_of(&[1.0, 0.0], &[0.0, 0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn odd_width_is_a_contract_error() {
        let mut store = ParamStore::<f64>::new();
        let vib = VibLayer::with_identity_projection(&mut store, "vib", 2, 0.01);
        let g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        assert!(matches!(vib.deterministic(&g, &store, z), Err(Error::Contract(_))));
    }

    #[test]
    fn deterministic_ignores_sigma() {
        let mut store = ParamStore::<f64>::new();
        let vib = VibLayer::with_identity_projection(&mut store, "vib", 2, 0.01);
        let g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![2.0, 3.0, 0.4, -1.0]])).unwrap();
        let b = g.constant(Tensor::from_rows(&[vec![2.0, 3.0, -5.0, 1.7]])).unwrap();
        let ya = vib.deterministic(&g, &store, a).unwrap();
        let yb = vib.deterministic(&g, &store, b).unwrap();
        assert_eq!(g.value(ya).data(), &[2.0, 3.0]);
        assert_eq!(g.value(ya).data(), g.value(yb).data());
    }

    #[test]
    fn log_sigma_is_clamped() {
        let mut store = ParamStore::<f64>::new();
        let vib = VibLayer::with_identity_projection(&mut store, "vib", 1, 0.01);
        let g = Graph::new();
        let z = g.constant(Tensor::from_rows(&[vec![0.0, 50.0]])).unwrap();
        let mut rng = crate::SeedRng::seed_from_u64(0);
        let out = vib.forward(&g, &store, z, &mut rng).unwrap();
        assert_eq!(g.item(out.log_sigma), LOG_SIGMA_MAX);
    }
}
