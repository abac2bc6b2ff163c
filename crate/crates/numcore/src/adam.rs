use crate::checkpoint::{self, Record};
use crate::error::{NumError, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter of the store
/// the optimizer was created for.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Tensor<T> {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor<T> {
        &self.v[i]
    }

    /// One update of every non-frozen parameter from its accumulated
    /// gradient, then clears all gradients. A non-finite gradient aborts
    /// before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(NumError::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad.is_finite()) {
            return Err(NumError::NonFiniteGradient {
                param: p.name.clone(),
            });
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));

        for ((p, m), v) in store.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.frozen {
                let iter = p
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(p.grad.data())
                    .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
                for ((w, &g), (mi, vi)) in iter {
                    *mi = b1 * *mi + one_b1 * g;
                    *vi = b2 * *vi + one_b2 * g * g;
                    let m_hat = *mi / bc1;
                    let v_hat = *vi / bc2;
                    *w -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            p.grad.fill(T::zero());
        }
        Ok(())
    }

    pub fn to_records(&self, prefix: &str, store: &ParamStore<T>) -> Vec<Record> {
        let mut out = vec![Record::from_u64s(format!("{prefix}step"), &[self.step])];
        for ((_, p), (m, v)) in store.iter().zip(self.m.iter().zip(&self.v)) {
            out.push(Record::from_tensor(format!("{prefix}m/{}", p.name), m));
            out.push(Record::from_tensor(format!("{prefix}v/{}", p.name), v));
        }
        out
    }

    pub fn load_records(
        &mut self,
        prefix: &str,
        store: &ParamStore<T>,
        records: &[Record],
    ) -> Result<()> {
        self.step = checkpoint::find(records, &format!("{prefix}step"))?.to_u64s()?[0];
        for (i, (_, p)) in store.iter().enumerate() {
            let shape = p.value.shape();
            self.m[i] = checkpoint::find(records, &format!("{prefix}m/{}", p.name))?.to_tensor(shape)?;
            self.v[i] = checkpoint::find(records, &format!("{prefix}v/{}", p.name))?.to_tensor(shape)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(value));
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = one_param(1.25);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store).unwrap();
        assert_eq!(store.value(crate::ParamId(0)).item(), 1.25);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // Start from known moments m=0.1, v=0.02 at step 3, gradient 0.5.
        let mut store = one_param(2.0);
        let cfg = AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut adam = Adam::new(cfg, &store);
        adam.step = 3;
        adam.m[0] = Tensor::scalar(0.1);
        adam.v[0] = Tensor::scalar(0.02);
        store.accumulate_grad(crate::ParamId(0), &Tensor::scalar(0.5));
        adam.step(&mut store).unwrap();

        let m = 0.9 * 0.1 + 0.1 * 0.5;
        let v = 0.999 * 0.02 + 0.001 * 0.25;
        let m_hat = m / (1.0 - 0.9f64.powi(4));
        let v_hat = v / (1.0 - 0.999f64.powi(4));
        let expected = 2.0 - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        let got = store.value(crate::ParamId(0)).item();
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        assert_eq!(store.grad(crate::ParamId(0)).item(), 0.0, "grads cleared");
    }

    #[test]
    fn constant_gradient_step_approaches_lr_sign() {
        let mut store = one_param(0.0);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..2000 {
            store.accumulate_grad(crate::ParamId(0), &Tensor::scalar(-0.37));
            adam.step(&mut store).unwrap();
            let now = store.value(crate::ParamId(0)).item();
            last_step = now - prev;
            prev = now;
        }
        assert!((last_step - 3e-3).abs() < 1e-6, "step {last_step}");
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = one_param(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        store.accumulate_grad(crate::ParamId(0), &Tensor::scalar(f64::NAN));
        match adam.step(&mut store) {
            Err(NumError::NonFiniteGradient { param }) => assert_eq!(param, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(store.value(crate::ParamId(0)).item(), 1.0);
    }
}
