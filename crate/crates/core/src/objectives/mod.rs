//! Self-supervised representation losses behind a name registry, the DQN
//! critic loss, and the weighted loss sum.

mod contrastive;
mod dqn;
mod inverse;
mod proto;

use std::collections::BTreeMap;

pub use contrastive::{contrastive_loss, ContrastiveObjective};
pub use dqn::{dqn_loss, TargetNetwork, TdBatch};
pub use inverse::{cross_entropy, InverseObjective};
pub use proto::{proto_loss, sinkhorn_targets, PrototypeBank, ProtoObjective};

use numcore::{Graph, ParamId, ParamStore, Real, Var};

use crate::{Error, Result, SeedRng};

/// Embedding pairs `(z_t, z_{t+k})` with the first action of each pair.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub anchor: Var,
    pub target: Var,
    pub actions: Vec<usize>,
    pub ks: Vec<usize>,
}

pub trait RepresentationObjective<T: Real> {
    fn name(&self) -> &'static str;

    /// Largest pair offset the objective consumes; pairs are drawn with `k`
    /// uniform over `[1, max_k]` within episodes.
    fn max_k(&self) -> usize {
        1
    }

    fn loss(&self, g: &Graph<T>, store: &ParamStore<T>, batch: &PairBatch) -> Result<Var>;

    /// Hook after each optimizer step (e.g. renormalizing prototypes).
    fn after_update(&mut self, _store: &mut ParamStore<T>) {}

    fn params(&self) -> Vec<ParamId>;
}

/// Everything an objective constructor may need.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveSpec {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub num_actions: usize,
    pub max_k: usize,
    pub num_prototypes: usize,
    pub proto_tau: f64,
    pub sinkhorn_iters: usize,
    pub proto_ema_target: bool,
    pub contrastive_tau: f64,
    pub contrastive_symmetric: bool,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            hidden_dim: 128,
            num_actions: 4,
            max_k: 8,
            num_prototypes: 16,
            proto_tau: 0.1,
            sinkhorn_iters: 3,
            proto_ema_target: false,
            contrastive_tau: 0.1,
            contrastive_symmetric: false,
        }
    }
}

pub type ObjectiveFactory<T> =
    fn(&ObjectiveSpec, &mut ParamStore<T>, &mut SeedRng) -> Result<Box<dyn RepresentationObjective<T>>>;

/// Name -> constructor table. `builtin()` holds the four shipped objectives;
/// more can be registered at runtime.
pub struct ObjectiveRegistry<T> {
    factories: BTreeMap<String, ObjectiveFactory<T>>,
}

impl<T: Real> ObjectiveRegistry<T> {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("proto", |spec, store, rng| {
            let bank = PrototypeBank::new(store, "proto", spec.num_prototypes, spec.latent_dim, spec, rng)?;
            Ok(Box::new(ProtoObjective { bank }))
        });
        r.register("inverse1", |spec, store, rng| {
            let obj = InverseObjective::new(store, spec.latent_dim, spec.hidden_dim, spec.num_actions, 1, rng)?;
            Ok(Box::new(obj))
        });
        r.register("inverse_k", |spec, store, rng| {
            let obj = InverseObjective::new(store, spec.latent_dim, spec.hidden_dim, spec.num_actions, spec.max_k, rng)?;
            Ok(Box::new(obj))
        });
        r.register("contrastive", |spec, _, _| {
            Ok(Box::new(ContrastiveObjective {
                tau: spec.contrastive_tau,
                symmetric: spec.contrastive_symmetric,
            }))
        });
        r
    }

    pub fn register(&mut self, name: &str, factory: ObjectiveFactory<T>) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(
        &self,
        name: &str,
        spec: &ObjectiveSpec,
        store: &mut ParamStore<T>,
        rng: &mut SeedRng,
    ) -> Result<Box<dyn RepresentationObjective<T>>> {
        let factory = self.factories.get(name).ok_or_else(|| {
            Error::config(format!("unknown objective `{name}`; known: {}", self.names().join(", ")))
        })?;
        factory(spec, store, rng)
    }
}

/// Loss components of one update. Absent terms contribute nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub objective: Option<Var>,
    pub discretization: Option<Var>,
    pub gaussian: Option<Var>,
    pub critic: Option<Var>,
}

/// Logged scalar values of [`LossTerms`], zero where absent.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub objective: f64,
    pub discretization: f64,
    pub gaussian: f64,
    pub critic: f64,
}

/// `objective + discretization + β_vib · gaussian (+ critic)`, refusing any
/// non-finite component by name.
pub fn total_loss<T: Real>(g: &Graph<T>, terms: &LossTerms, beta_vib: f64) -> Result<(Var, LossValues)> {
    let parts = [
        ("objective", terms.objective, 1.0),
        ("discretization", terms.discretization, 1.0),
        ("gaussian", terms.gaussian, beta_vib),
        ("critic", terms.critic, 1.0),
    ];
    let mut values = LossValues::default();
    let mut sum: Option<Var> = None;
    for (name, var, weight) in parts {
        let Some(v) = var else { continue };
        let x = g.item(v).to_f64c();
        if !x.is_finite() {
            return Err(Error::NonFiniteLoss { component: name });
        }
        match name {
            "objective" => values.objective = x,
            "discretization" => values.discretization = x,
            "gaussian" => values.gaussian = x,
            _ => values.critic = x,
        }
        let w = if weight == 1.0 { v } else { g.scale(v, weight)? };
        sum = Some(match sum {
            Some(s) => g.add(s, w)?,
            None => w,
        });
    }
    let total = match sum {
        Some(s) => s,
        None => g.constant(numcore::Tensor::scalar(T::zero()))?,
    };
    values.total = g.item(total).to_f64c();
    Ok((total, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use numcore::Tensor;
    use rand::SeedableRng;

    fn scalar(g: &Graph<f64>, x: f64) -> Var {
        g.constant(Tensor::scalar(x)).unwrap()
    }

    #[test]
    fn weighted_sum_arithmetic() {
        let g = Graph::<f64>::new();
        let terms = LossTerms {
            objective: Some(scalar(&g, 2.0)),
            discretization: Some(scalar(&g, 3.0)),
            gaussian: Some(scalar(&g, 100.0)),
            critic: None,
        };
        let (v, vals) = total_loss(&g, &terms, 0.01).unwrap();
        assert!((g.item(v) - 6.0).abs() < 1e-12);
        assert_eq!(vals.gaussian, 100.0);
        let zeros = LossTerms {
            objective: Some(scalar(&g, 0.0)),
            discretization: Some(scalar(&g, 0.0)),
            gaussian: Some(scalar(&g, 0.0)),
            critic: None,
        };
        assert_eq!(g.item(total_loss(&g, &zeros, 0.01).unwrap().0), 0.0);
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_rows(&[vec![0.3, -1.2]]));
        let build = |g: &Graph<f64>, store: &ParamStore<f64>| {
            let w = g.param(store, id).unwrap();
            let terms = LossTerms {
                objective: Some(g.sum(g.square(w).unwrap()).unwrap()),
                discretization: Some(g.sum(g.exp(w).unwrap()).unwrap()),
                gaussian: Some(g.sum(g.tanh(w).unwrap()).unwrap()),
                critic: None,
            };
            (terms, w)
        };
        let g = Graph::new();
        let (terms, w) = build(&g, &store);
        let (total, _) = total_loss(&g, &terms, 0.5).unwrap();
        let grad = g.backward(total).unwrap().wrt(w).unwrap().clone();
        let h = 1e-5;
        for i in 0..2 {
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.value_mut(id).data_mut()[i] += delta;
                let g = Graph::new();
                let (t, _) = total_loss(&g, &build(&g, &s).0, 0.5).unwrap();
                g.item(t)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - grad.data()[i]).abs() / fd.abs().max(1e-8) < 1e-4);
        }
    }

    #[test]
    fn registry_builds_every_builtin() {
        let reg = ObjectiveRegistry::<f64>::builtin();
        assert_eq!(reg.names(), vec!["contrastive", "inverse1", "inverse_k", "proto"]);
        let spec = ObjectiveSpec {
            latent_dim: 4,
            hidden_dim: 8,
            ..Default::default()
        };
        let mut rng = SeedRng::seed_from_u64(0);
        for name in reg.names() {
            let mut store = ParamStore::new();
            let obj = reg.build(name, &spec, &mut store, &mut rng).unwrap();
            assert_eq!(obj.name(), name);
        }
        let mut store = ParamStore::new();
        let err = reg.build("bogus", &spec, &mut store, &mut rng).err().unwrap();
        assert!(err.to_string().contains("proto"));
    }
}
