use numcore::{Graph, ParamId, ParamStore, Real, Var};

use super::{PairBatch, RepresentationObjective};
use crate::{Error, Result};

/// InfoNCE over cosine similarities: row `i` of `a` should pick row `i` of
/// `b` against the other rows of the batch.
pub fn contrastive_loss<T: Real>(g: &Graph<T>, a: Var, b: Var, tau: f64, symmetric: bool) -> Result<Var> {
    let (n, _) = g.shape(a);
    if n < 2 {
        return Err(Error::contract("contrastive loss needs a batch of at least 2"));
    }
    if g.shape(b) != g.shape(a) {
        return Err(Error::contract("contrastive pair shapes differ"));
    }
    let diag: Vec<usize> = (0..n).collect();
    let an = g.l2_normalize_rows(a)?;
    let bn = g.l2_normalize_rows(b)?;
    let one_way = |x: Var, y: Var| -> Result<Var> {
        let logits = g.scale(g.matmul_bt(x, y)?, 1.0 / tau)?;
        let picked = g.gather_cols(g.log_softmax(logits)?, &diag)?;
        Ok(g.scale(g.sum(picked)?, -1.0 / n as f64)?)
    };
    let forward = one_way(an, bn)?;
    if symmetric {
        Ok(g.scale(g.add(forward, one_way(bn, an)?)?, 0.5)?)
    } else {
        Ok(forward)
    }
}

/// Temporal contrastive objective on `(z_t, z_{t+1})` pairs.
pub struct ContrastiveObjective {
    pub tau: f64,
    pub symmetric: bool,
}

impl<T: Real> RepresentationObjective<T> for ContrastiveObjective {
    fn name(&self) -> &'static str {
        "contrastive"
    }

    fn loss(&self, g: &Graph<T>, _store: &ParamStore<T>, batch: &PairBatch) -> Result<Var> {
        contrastive_loss(g, batch.anchor, batch.target, self.tau, self.symmetric)
    }

    fn params(&self) -> Vec<ParamId> {
        Vec::new()
    }
}
