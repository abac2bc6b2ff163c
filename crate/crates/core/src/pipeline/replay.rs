use std::collections::VecDeque;

use numcore::checkpoint::{self, Record};
use rand::Rng;

use crate::envs::{Cell, ObsKey};
use crate::{Error, Result};

/// One environment step. Observations are stored as render keys and drawn
/// again when sampled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub obs: ObsKey,
    pub action: usize,
    /// Environment reward.
    pub reward: f64,
    /// Intrinsic reward fixed at collection time, if that mode is on.
    pub intrinsic: Option<f64>,
    pub next: ObsKey,
    pub terminated: bool,
    pub truncated: bool,
    pub episode: u64,
}

/// `(t, k)` pair inside one episode: observation `o_t`, action `a_t` and
/// observation `o_{t+k}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pair {
    /// Logical index of transition `t`.
    pub index: usize,
    pub k: usize,
    pub anchor: ObsKey,
    pub target: ObsKey,
    pub action: usize,
}

/// FIFO of transitions in collection order.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay capacity must be positive"));
        }
        Ok(Self {
            capacity,
            items: VecDeque::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform transitions, with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(Error::contract("sampling from an empty replay buffer"));
        }
        Ok((0..batch).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    /// Number of transitions `t, t+1, ..` that follow `i` in the same episode,
    /// `i` included; the largest valid `k` at `i`.
    fn run_length(&self, i: usize, cap: usize) -> usize {
        let ep = self.items[i].episode;
        let mut n = 1;
        while n < cap && i + n < self.items.len() && self.items[i + n].episode == ep {
            n += 1;
        }
        n
    }

    fn pair(&self, index: usize, k: usize) -> Pair {
        let t = &self.items[index];
        Pair {
            index,
            k,
            anchor: t.obs,
            target: self.items[index + k - 1].next,
            action: t.action,
        }
    }

    /// Pairs uniform over every valid `(t, k)` with `1 <= k <= max_k` and
    /// `o_{t+k}` in the same episode as `o_t`. With `fixed_k`, `k` is that
    /// value and `t` is uniform over positions that admit it.
    pub fn sample_pairs<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        batch: usize,
        max_k: usize,
        fixed_k: Option<usize>,
    ) -> Result<Vec<Pair>> {
        if max_k == 0 {
            return Err(Error::config("max_k must be at least 1"));
        }
        if self.items.is_empty() {
            return Err(Error::contract("sampling pairs from an empty replay buffer"));
        }
        let n = self.items.len();
        match fixed_k {
            Some(k) => {
                if k == 0 {
                    return Err(Error::config("pair offset must be at least 1"));
                }
                let valid: Vec<usize> = (0..n).filter(|&i| self.run_length(i, k) == k).collect();
                if valid.is_empty() {
                    return Err(Error::contract(format!("no episode in the buffer admits k = {k}")));
                }
                Ok((0..batch)
                    .map(|_| self.pair(valid[rng.random_range(0..valid.len())], k))
                    .collect())
            }
            // Rejection sampling is uniform over valid pairs, and k = 1 is
            // always valid, so it terminates.
            None => Ok((0..batch)
                .map(|_| loop {
                    let i = rng.random_range(0..n);
                    let k = rng.random_range(1..=max_k);
                    if self.run_length(i, k) == k {
                        break self.pair(i, k);
                    }
                })
                .collect()),
        }
    }

    pub fn to_records(&self, prefix: &str) -> Vec<Record> {
        let mut rows = Vec::with_capacity(self.items.len() * ROW);
        for t in &self.items {
            rows.extend(encode(t));
        }
        vec![
            Record::from_u64s(format!("{prefix}capacity"), &[self.capacity as u64]),
            Record::from_u64s(format!("{prefix}items"), &rows),
        ]
    }

    pub fn load_records(prefix: &str, records: &[Record]) -> Result<Self> {
        let capacity = checkpoint::find(records, &format!("{prefix}capacity"))?.to_u64s()?[0] as usize;
        let rows = checkpoint::find(records, &format!("{prefix}items"))?.to_u64s()?;
        if rows.len() % ROW != 0 {
            return Err(Error::contract(format!("replay record `{prefix}items` is truncated")));
        }
        let mut buf = Self::new(capacity)?;
        for chunk in rows.chunks(ROW) {
            buf.push(decode(chunk)?);
        }
        Ok(buf)
    }
}

const NO_GOAL: u64 = u64::MAX;
const KEY: usize = 4;
const ROW: usize = 2 * KEY + 6;

fn encode_key(k: &ObsKey) -> [u64; KEY] {
    [
        k.agent.index() as u64,
        k.goal.map_or(NO_GOAL, |g| g.index() as u64),
        k.step as u64,
        k.noise_seed,
    ]
}

fn decode_key(v: &[u64]) -> Result<ObsKey> {
    let cell = |i: u64| -> Result<Cell> {
        if i as usize >= crate::envs::NUM_CELLS {
            return Err(Error::contract(format!("cell index {i} in checkpoint")));
        }
        Ok(Cell::from_index(i as usize))
    };
    Ok(ObsKey {
        agent: cell(v[0])?,
        goal: if v[1] == NO_GOAL { None } else { Some(cell(v[1])?) },
        step: v[2] as u32,
        noise_seed: v[3],
    })
}

fn encode(t: &Transition) -> [u64; ROW] {
    let mut out = [0u64; ROW];
    out[..KEY].copy_from_slice(&encode_key(&t.obs));
    out[KEY..2 * KEY].copy_from_slice(&encode_key(&t.next));
    out[2 * KEY] = t.action as u64;
    out[2 * KEY + 1] = t.reward.to_bits();
    out[2 * KEY + 2] = t.intrinsic.is_some() as u64;
    out[2 * KEY + 3] = t.intrinsic.unwrap_or(0.0).to_bits();
    out[2 * KEY + 4] = t.terminated as u64 | (t.truncated as u64) << 1;
    out[2 * KEY + 5] = t.episode;
    out
}

fn decode(v: &[u64]) -> Result<Transition> {
    let flags = v[2 * KEY + 4];
    Ok(Transition {
        obs: decode_key(&v[..KEY])?,
        next: decode_key(&v[KEY..2 * KEY])?,
        action: v[2 * KEY] as usize,
        reward: f64::from_bits(v[2 * KEY + 1]),
        intrinsic: (v[2 * KEY + 2] != 0).then(|| f64::from_bits(v[2 * KEY + 3])),
        terminated: flags & 1 != 0,
        truncated: flags & 2 != 0,
        episode: v[2 * KEY + 5],
    })
}
