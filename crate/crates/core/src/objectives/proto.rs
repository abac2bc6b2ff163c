use numcore::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{ObjectiveSpec, PairBatch, RepresentationObjective};
use crate::{Error, Result};

/// Row-stochastic targets from `exp(scores / τ)` by alternating column and
/// row normalization. Columns are scaled to sum `batch / M` and rows to 1, so
/// the last step leaves every row a distribution.
pub fn sinkhorn_targets<T: Real>(scores: &Tensor<T>, tau: f64, iters: usize) -> Result<Tensor<T>> {
    if !scores.is_finite() {
        return Err(Error::contract("sinkhorn scores must be finite"));
    }
    let (b, m) = (scores.rows(), scores.cols());
    if b == 0 || m == 0 {
        return Err(Error::contract("sinkhorn on an empty score matrix"));
    }
    let max = scores.data().iter().copied().fold(T::neg_infinity(), T::max);
    let inv_tau = T::of(1.0 / tau);
    let mut q = scores.map(|s| ((s - max) * inv_tau).exp());
    let col_target = T::of(b as f64 / m as f64);
    for _ in 0..iters {
        let mut col = vec![T::zero(); m];
        for r in 0..b {
            for (c, &x) in q.row(r).iter().enumerate() {
                col[c] += x;
            }
        }
        for r in 0..b {
            for (x, &s) in q.row_mut(r).iter_mut().zip(&col) {
                *x = *x * col_target / s;
            }
        }
        normalize_rows(&mut q);
    }
    if iters == 0 {
        normalize_rows(&mut q);
    }
    Ok(q)
}

fn normalize_rows<T: Real>(q: &mut Tensor<T>) {
    for r in 0..q.rows() {
        let row = q.row_mut(r);
        let s: T = row.iter().copied().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
}

/// `−mean_b Σ_m q log p` with `p = softmax(norm(z_s) Pᵀ / τ)` and `q` the
/// Sinkhorn assignment of `norm(z_t)` onto `target_protos`, held constant.
pub fn proto_loss<T: Real>(
    g: &Graph<T>,
    z_s: Var,
    z_t: Var,
    protos: Var,
    target_protos: Var,
    tau: f64,
    iters: usize,
) -> Result<Var> {
    let (b, _) = g.shape(z_s);
    if b < 2 {
        return Err(Error::contract("prototype loss needs a batch of at least 2"));
    }
    let logits = g.scale(g.matmul_bt(g.l2_normalize_rows(z_s)?, protos)?, 1.0 / tau)?;
    let log_p = g.log_softmax(logits)?;
    let scores = {
        let zt = g.detach(z_t)?;
        let tp = g.detach(target_protos)?;
        g.to_tensor(g.matmul_bt(g.l2_normalize_rows(zt)?, tp)?)
    };
    let q = g.constant(sinkhorn_targets(&scores, tau, iters)?)?;
    Ok(g.scale(g.sum(g.mul(q, log_p)?)?, -1.0 / b as f64)?)
}

/// `M` unit-norm prototypes of dimension `h`, optionally with an EMA copy
/// that produces the targets.
#[derive(Clone, Debug)]
pub struct PrototypeBank {
    pub prototypes: ParamId,
    pub target: Option<ParamId>,
    pub tau: f64,
    pub sinkhorn_iters: usize,
    pub target_decay: f64,
}

impl PrototypeBank {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        count: usize,
        dim: usize,
        spec: &ObjectiveSpec,
        rng: &mut R,
    ) -> Result<Self> {
        if count < 2 {
            return Err(Error::config("a prototype bank needs at least 2 prototypes"));
        }
        let data = (0..count * dim).map(|_| T::of(rng.sample(StandardNormal))).collect();
        let mut init = Tensor::matrix(count, dim, data)?;
        normalize_l2(&mut init);
        let target = spec.proto_ema_target.then(|| {
            let id = store.add(format!("{name}.target"), init.clone());
            store.set_frozen(id, true);
            id
        });
        Ok(Self {
            prototypes: store.add(format!("{name}.prototypes"), init),
            target,
            tau: spec.proto_tau,
            sinkhorn_iters: spec.sinkhorn_iters,
            target_decay: 0.99,
        })
    }

    pub fn renormalize<T: Real>(&self, store: &mut ParamStore<T>) {
        normalize_l2(store.value_mut(self.prototypes));
        if let Some(t) = self.target {
            let online = store.value(self.prototypes).clone();
            let d = T::of(self.target_decay);
            let tgt = store.value_mut(t);
            *tgt = tgt.zip_map(&online, |a, b| d * a + (T::one() - d) * b);
            normalize_l2(tgt);
        }
    }
}

fn normalize_l2<T: Real>(t: &mut Tensor<T>) {
    for r in 0..t.rows() {
        let row = t.row_mut(r);
        let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
        if n > T::zero() {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
}

pub struct ProtoObjective {
    pub bank: PrototypeBank,
}

impl<T: Real> RepresentationObjective<T> for ProtoObjective {
    fn name(&self) -> &'static str {
        "proto"
    }

    fn loss(&self, g: &Graph<T>, store: &ParamStore<T>, batch: &PairBatch) -> Result<Var> {
        let protos = g.param(store, self.bank.prototypes)?;
        let target = match self.bank.target {
            Some(id) => g.param(store, id)?,
            None => protos,
        };
        proto_loss(g, batch.anchor, batch.target, protos, target, self.bank.tau, self.bank.sinkhorn_iters)
    }

    fn after_update(&mut self, store: &mut ParamStore<T>) {
        self.bank.renormalize(store);
    }

    fn params(&self) -> Vec<ParamId> {
        vec![self.bank.prototypes]
    }
}
