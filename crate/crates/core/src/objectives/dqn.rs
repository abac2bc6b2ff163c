use numcore::checkpoint::Record;
use numcore::{Graph, Linear, Mlp, ParamStore, Real, Tensor, Var};

use crate::{Error, Result};

/// Frozen copy of a Q network in its own store, tracked by Polyak averaging.
#[derive(Clone, Debug)]
pub struct TargetNetwork<T> {
    pub store: ParamStore<T>,
    pub net: Mlp,
    source: Mlp,
}

impl<T: Real> TargetNetwork<T> {
    pub fn new(online: &ParamStore<T>, net: &Mlp) -> Self {
        let mut store = ParamStore::new();
        let mut copy = net.clone();
        for (dst, src) in copy.layers.iter_mut().zip(&net.layers) {
            *dst = Linear {
                weight: store.add(online.name(src.weight), online.value(src.weight).clone()),
                bias: store.add(online.name(src.bias), online.value(src.bias).clone()),
                ..src.clone()
            };
        }
        Self {
            store,
            net: copy,
            source: net.clone(),
        }
    }

    /// `θ' ← (1 − τ) θ' + τ θ`.
    pub fn soft_update(&mut self, online: &ParamStore<T>, tau: f64) {
        let t = T::of(tau);
        let keep = T::one() - t;
        for (dst, src) in self.net.params().into_iter().zip(self.source.params()) {
            let target = self.store.value_mut(dst);
            for (a, &b) in target.data_mut().iter_mut().zip(online.value(src).data()) {
                *a = keep * *a + t * b;
            }
        }
    }

    /// Copies the online weights outright.
    pub fn hard_update(&mut self, online: &ParamStore<T>) {
        self.soft_update(online, 1.0);
    }

    /// Q values for a batch of embeddings, computed off-tape.
    pub fn q_values(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::inference();
        let x = g.constant(z.clone())?;
        let q = self.net.forward(&g, &self.store, x)?;
        Ok(g.to_tensor(q))
    }

    pub fn to_records(&self, prefix: &str) -> Vec<Record> {
        self.store.to_records(prefix)
    }

    pub fn load_records(&mut self, prefix: &str, records: &[Record]) -> Result<()> {
        Ok(self.store.load_records(prefix, records)?)
    }
}

/// One-step TD batch. `next_q` holds target-network values for the next
/// states, so no gradient can reach the target path.
#[derive(Clone, Debug)]
pub struct TdBatch<'a, T> {
    pub actions: &'a [usize],
    pub rewards: &'a [f64],
    pub terminals: &'a [bool],
    pub next_q: &'a Tensor<T>,
}

/// `mean (Q(s, a) − (r + γ (1 − done) max_a' Q'(s', a')))²`.
pub fn dqn_loss<T: Real>(g: &Graph<T>, q: Var, batch: &TdBatch<'_, T>, gamma: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::config(format!("discount {gamma} outside [0, 1)")));
    }
    let (b, _) = g.shape(q);
    if b == 0 {
        return Err(Error::contract("empty TD batch"));
    }
    if batch.actions.len() != b
        || batch.rewards.len() != b
        || batch.terminals.len() != b
        || batch.next_q.rows() != b
    {
        return Err(Error::contract("TD batch fields disagree in length"));
    }
    let targets: Vec<T> = (0..b)
        .map(|i| {
            let best = batch.next_q.row(i).iter().copied().fold(T::neg_infinity(), T::max);
            let boot = if batch.terminals[i] { T::zero() } else { T::of(gamma) * best };
            T::of(batch.rewards[i]) + boot
        })
        .collect();
    let target = g.constant(Tensor::matrix(b, 1, targets)?)?;
    let picked = g.gather_cols(q, batch.actions)?;
    Ok(g.mean(g.square(g.sub(picked, target)?)?)?)
}
