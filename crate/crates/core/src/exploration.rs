//! k-nearest-neighbour intrinsic reward over a FIFO queue of discretized
//! embeddings.

use std::collections::VecDeque;

use numcore::checkpoint::{self, Record};
use numcore::tensor::squared_distance;
use numcore::{ParamStore, Real, Tensor};

use crate::bottleneck::Bottleneck;
use crate::{Error, Result};

/// Bounded FIFO of embeddings, each tagged with a unique insertion id.
#[derive(Clone, Debug)]
pub struct CandidateQueue<T> {
    capacity: usize,
    dim: usize,
    next_id: u64,
    entries: VecDeque<(u64, Vec<T>)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardOutcome {
    pub reward: f64,
    /// Fewer than `k` candidates were available; `reward` is 0.
    pub warm_up: bool,
}

impl<T: Real> CandidateQueue<T> {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("queue capacity must be positive"));
        }
        Ok(Self {
            capacity,
            dim,
            next_id: 0,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends `z`, evicting the oldest entry when full. Returns its id.
    pub fn push(&mut self, z: Vec<T>) -> Result<u64> {
        if z.len() != self.dim {
            return Err(Error::contract(format!("queue holds {}-dim vectors, got {}", self.dim, z.len())));
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        let id = self.next_id;
        self.next_id += 1;
        self.entries.push_back((id, z));
        Ok(id)
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &[T]> {
        self.entries.iter().map(|(_, v)| v.as_slice())
    }

    /// Distance from `z` to its `k`-th nearest entry, skipping the entry
    /// with id `exclude` (identity, not value).
    pub fn intrinsic_reward(&self, z: &[T], k: usize, exclude: Option<u64>) -> Result<RewardOutcome> {
        if k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if z.len() != self.dim {
            return Err(Error::contract(format!("query has {} dims, queue {}", z.len(), self.dim)));
        }
        let mut dists: Vec<T> = self
            .entries
            .iter()
            .filter(|(id, _)| Some(*id) != exclude)
            .map(|(_, v)| squared_distance(z, v))
            .collect();
        if dists.len() < k {
            return Ok(RewardOutcome {
                reward: 0.0,
                warm_up: true,
            });
        }
        let (_, kth, _) = dists.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).expect("finite distances"));
        Ok(RewardOutcome {
            reward: kth.to_f64c().sqrt(),
            warm_up: false,
        })
    }

    pub fn to_records(&self, prefix: &str) -> Vec<Record> {
        let ids: Vec<u64> = self.entries.iter().map(|(id, _)| *id).collect();
        let data: Vec<T> = self.entries.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        vec![
            Record::from_u64s(format!("{prefix}next_id"), &[self.next_id]),
            Record::from_u64s(format!("{prefix}ids"), &ids),
            Record::from_tensor(
                format!("{prefix}entries"),
                &Tensor::matrix(ids.len(), self.dim, data).expect("sized"),
            ),
        ]
    }

    pub fn load_records(&mut self, prefix: &str, records: &[Record]) -> Result<()> {
        self.next_id = checkpoint::find(records, &format!("{prefix}next_id"))?.to_u64s()?[0];
        let ids = checkpoint::find(records, &format!("{prefix}ids"))?.to_u64s()?;
        if ids.len() > self.capacity {
            return Err(Error::contract("checkpointed queue exceeds capacity"));
        }
        let entries: Tensor<T> =
            checkpoint::find(records, &format!("{prefix}entries"))?.to_tensor(&[ids.len(), self.dim])?;
        self.entries = ids
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, entries.row(i).to_vec()))
            .collect();
        Ok(())
    }
}

/// Where queue entries come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueueSource {
    /// `z̃`, after quantization.
    Quantized,
    /// `ẑ`, the deterministic VIB output before quantization.
    Continuous,
}

/// Rewards for raw encoder outputs `z: [batch, 2h or h]`, row by row: each
/// row is embedded (`vib_deterministic -> quantize`), scored against the
/// queue, and only then enqueued.
pub fn reward_pipeline<T: Real>(
    store: &ParamStore<T>,
    bottleneck: &Bottleneck<T>,
    z: &Tensor<T>,
    queue: &mut CandidateQueue<T>,
    k: usize,
    source: QueueSource,
) -> Result<Vec<RewardOutcome>> {
    let embedded = bottleneck.embed(store, z)?;
    let rows = match source {
        QueueSource::Quantized => &embedded.quantized,
        QueueSource::Continuous => &embedded.continuous,
    };
    (0..rows.rows())
        .map(|r| {
            let v = rows.row(r);
            let out = queue.intrinsic_reward(v, k, None)?;
            queue.push(v.to_vec())?;
            Ok(out)
        })
        .collect()
}
