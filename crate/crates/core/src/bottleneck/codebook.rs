use std::fmt::Write as _;

use num_bigint::BigUint;
use numcore::checkpoint::{self, Record};
use numcore::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookUpdate {
    /// Codes trained by the codebook half of the VQ loss.
    Gradient,
    /// Codes track running means of their assigned segments.
    Ema { decay: f64 },
}

/// `G` groups of `L` codes of dimension `d`. The code vectors live in the
/// parameter store as one `[G * L, d]` matrix, row `g * L + j` being code
/// `j` of group `g`.
#[derive(Clone, Debug)]
pub struct Codebook<T> {
    pub groups: usize,
    pub codes_per_group: usize,
    pub code_dim: usize,
    pub codes: ParamId,
    pub commitment: f64,
    pub update: CodebookUpdate,
    /// Steps a code may go unused before it is reseeded.
    pub dead_window: u64,
    usage: Vec<u64>,
    window_usage: Vec<u64>,
    last_used: Vec<u64>,
    clock: u64,
    initialized: bool,
    ema_count: Vec<T>,
    ema_sum: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct Quantized {
    pub z_q: Var,
    pub vq_loss: Var,
    /// Row-major `[batch, groups]` code indices.
    pub codes: Vec<usize>,
    /// Euclidean distance from each segment to its code, same layout.
    pub distances: Vec<f64>,
}

impl<T: Real> Codebook<T> {
    /// Codes start uniform in `[-1, 1)`. `init_from_data` replaces them with
    /// samples of real segments before the first training step.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        latent_dim: usize,
        groups: usize,
        codes_per_group: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if groups == 0 || codes_per_group == 0 {
            return Err(Error::config("codebook needs at least one group and one code"));
        }
        if latent_dim % groups != 0 {
            return Err(Error::config(format!(
                "latent dim {latent_dim} is not divisible by {groups} groups"
            )));
        }
        let code_dim = latent_dim / groups;
        let n = groups * codes_per_group;
        let data = (0..n * code_dim)
            .map(|_| T::of(rng.random_range(-1.0..1.0)))
            .collect();
        let codes = store.add(format!("{name}.codes"), Tensor::matrix(n, code_dim, data)?);
        Ok(Self {
            groups,
            codes_per_group,
            code_dim,
            codes,
            commitment: 0.25,
            update: CodebookUpdate::Gradient,
            dead_window: 1000,
            usage: vec![0; n],
            window_usage: vec![0; n],
            last_used: vec![0; n],
            clock: 0,
            initialized: false,
            ema_count: vec![T::one(); n],
            ema_sum: store.value(codes).data().to_vec(),
        })
    }

    /// Codebook with explicit vectors, rows ordered as in the store layout.
    pub fn from_vectors(
        store: &mut ParamStore<T>,
        name: &str,
        groups: usize,
        vectors: Tensor<T>,
    ) -> Result<Self> {
        let n = vectors.rows();
        if groups == 0 || n % groups != 0 {
            return Err(Error::config(format!("{n} codes do not split into {groups} groups")));
        }
        let sum = vectors.data().to_vec();
        let code_dim = vectors.cols();
        let codes = store.add(format!("{name}.codes"), vectors);
        Ok(Self {
            groups,
            codes_per_group: n / groups,
            code_dim,
            codes,
            commitment: 0.25,
            update: CodebookUpdate::Gradient,
            dead_window: 1000,
            usage: vec![0; n],
            window_usage: vec![0; n],
            last_used: vec![0; n],
            clock: 0,
            initialized: true,
            ema_count: vec![T::one(); n],
            ema_sum: sum,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.groups * self.code_dim
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    pub fn window_usage(&self) -> &[u64] {
        &self.window_usage
    }

    pub fn group_usage(&self, group: usize) -> &[u64] {
        let l = self.codes_per_group;
        &self.usage[group * l..(group + 1) * l]
    }

    pub fn group_window_usage(&self, group: usize) -> &[u64] {
        let l = self.codes_per_group;
        &self.window_usage[group * l..(group + 1) * l]
    }

    pub fn reset_window(&mut self) {
        self.window_usage.fill(0);
    }

    /// Number of training quantize calls so far.
    pub fn steps(&self) -> u64 {
        self.clock
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Whether the codebook has been through at least one training call.
    pub fn is_trained(&self) -> bool {
        self.clock > 0
    }

    pub fn code(&self, store: &ParamStore<T>, group: usize, index: usize) -> Vec<T> {
        store.value(self.codes).row(group * self.codes_per_group + index).to_vec()
    }

    /// Nearest code of one segment in `group`: (index, squared distance).
    /// Ties go to the lowest index.
    pub fn nearest(&self, store: &ParamStore<T>, group: usize, segment: &[T]) -> (usize, T) {
        let codes = store.value(self.codes);
        let base = group * self.codes_per_group;
        let mut best = (0, T::infinity());
        for j in 0..self.codes_per_group {
            let d = numcore::tensor::squared_distance(segment, codes.row(base + j));
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }

    /// Pure lookup over a `[batch, m]` matrix: quantized values and
    /// row-major `[batch, groups]` codes. Touches no statistics.
    pub fn lookup(&self, store: &ParamStore<T>, z: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        self.check_width(z.cols())?;
        let codes = store.value(self.codes);
        let (d, l) = (self.code_dim, self.codes_per_group);
        let mut out = Vec::with_capacity(z.len());
        let mut idx = Vec::with_capacity(z.rows() * self.groups);
        for r in 0..z.rows() {
            for (g, seg) in z.row(r).chunks(d).enumerate() {
                let (j, _) = self.nearest(store, g, seg);
                out.extend_from_slice(codes.row(g * l + j));
                idx.push(j);
            }
        }
        Ok((Tensor::matrix(z.rows(), z.cols(), out)?, idx))
    }

    fn check_width(&self, width: usize) -> Result<()> {
        if width != self.latent_dim() {
            return Err(Error::config(format!(
                "latent width {width} does not match codebook ({} groups x {})",
                self.groups, self.code_dim
            )));
        }
        Ok(())
    }

    /// Training-time quantization of `z_e: [batch, m]`. The forward value of
    /// `z_q` is the selected codes, its gradient flows to `z_e` unchanged.
    /// `vq_loss` is the batch mean of
    /// `Σ_g ||sg(c_g) − e_g||² + β ||c_g − sg(e_g)||²`; in EMA mode only the
    /// commitment half is kept. Usage counters advance.
    pub fn quantize(&mut self, g: &Graph<T>, store: &ParamStore<T>, z_e: Var) -> Result<Quantized> {
        let (batch, width) = g.shape(z_e);
        self.check_width(width)?;
        if batch == 0 {
            return Err(Error::contract("quantize on an empty batch"));
        }
        let (zq_values, codes) = self.lookup(store, &g.value(z_e))?;
        let distances = {
            let z = g.value(z_e);
            let mut out = Vec::with_capacity(codes.len());
            for r in 0..batch {
                let zr = z.row(r);
                let qr = zq_values.row(r);
                for gi in 0..self.groups {
                    let s = gi * self.code_dim..(gi + 1) * self.code_dim;
                    out.push(numcore::tensor::euclidean_distance(&zr[s.clone()], &qr[s]).to_f64c());
                }
            }
            out
        };

        let rows: Vec<usize> = codes
            .iter()
            .enumerate()
            .map(|(i, &j)| (i % self.groups) * self.codes_per_group + j)
            .collect();
        let table = g.param(store, self.codes)?;
        let selected = g.reshape(g.gather_rows(table, &rows)?, batch, width)?;
        let inv_b = 1.0 / batch as f64;
        let commit = g.sum(g.square(g.sub(z_e, g.detach(selected)?)?)?)?;
        let mut loss = g.scale(commit, self.commitment * inv_b)?;
        if self.update == CodebookUpdate::Gradient {
            let cb = g.sum(g.square(g.sub(g.detach(z_e)?, selected)?)?)?;
            loss = g.add(loss, g.scale(cb, inv_b)?)?;
        }
        let z_q = g.straight_through(z_e, zq_values)?;

        self.clock += 1;
        for (i, &j) in codes.iter().enumerate() {
            let k = (i % self.groups) * self.codes_per_group + j;
            self.usage[k] += 1;
            self.window_usage[k] += 1;
            self.last_used[k] = self.clock;
        }
        Ok(Quantized {
            z_q,
            vq_loss: loss,
            codes,
            distances,
        })
    }

    /// Replaces every code with a randomly chosen segment of `z: [batch, m]`
    /// from the same group. Runs once; later calls are no-ops.
    pub fn init_from_data<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore<T>,
        z: &Tensor<T>,
        rng: &mut R,
    ) -> Result<()> {
        if self.initialized {
            return Ok(());
        }
        self.check_width(z.cols())?;
        if z.rows() == 0 {
            return Err(Error::contract("codebook init needs at least one row"));
        }
        let (d, l) = (self.code_dim, self.codes_per_group);
        for gi in 0..self.groups {
            for j in 0..l {
                let r = rng.random_range(0..z.rows());
                let seg = &z.row(r)[gi * d..(gi + 1) * d];
                self.set_code(store, gi * l + j, seg);
            }
        }
        self.initialized = true;
        Ok(())
    }

    fn set_code(&mut self, store: &mut ParamStore<T>, row: usize, v: &[T]) {
        store.value_mut(self.codes).row_mut(row).copy_from_slice(v);
        self.ema_count[row] = T::one();
        self.ema_sum[row * self.code_dim..(row + 1) * self.code_dim].copy_from_slice(v);
    }

    /// EMA codebook update from assigned segments (`codes` row-major
    /// `[batch, groups]` over the rows of `z`):
    /// `N ← λN + (1−λ)n`, `M ← λM + (1−λ)Σ`, `e = M / N`.
    /// Codes without assignments are left alone.
    pub fn ema_update(&mut self, store: &mut ParamStore<T>, z: &Tensor<T>, codes: &[usize]) -> Result<()> {
        let CodebookUpdate::Ema { decay } = self.update else {
            return Err(Error::contract("ema_update on a gradient-mode codebook"));
        };
        self.check_width(z.cols())?;
        if codes.len() != z.rows() * self.groups {
            return Err(Error::contract("code count does not match batch"));
        }
        let (d, l) = (self.code_dim, self.codes_per_group);
        let n = self.groups * l;
        let mut count = vec![T::zero(); n];
        let mut sum = vec![T::zero(); n * d];
        for (i, &j) in codes.iter().enumerate() {
            let (r, gi) = (i / self.groups, i % self.groups);
            let k = gi * l + j;
            count[k] += T::one();
            let seg = &z.row(r)[gi * d..(gi + 1) * d];
            for (s, &x) in sum[k * d..(k + 1) * d].iter_mut().zip(seg) {
                *s += x;
            }
        }
        let lambda = T::of(decay);
        let keep = T::one() - lambda;
        let table = store.value_mut(self.codes);
        for k in (0..n).filter(|&k| count[k] > T::zero()) {
            self.ema_count[k] = lambda * self.ema_count[k] + keep * count[k];
            let nk = self.ema_count[k];
            let row = table.row_mut(k);
            for c in 0..d {
                let m = &mut self.ema_sum[k * d + c];
                *m = lambda * *m + keep * sum[k * d + c];
                row[c] = *m / nk;
            }
        }
        Ok(())
    }

    /// Codes unused for `dead_window` steps are reset to random segments of
    /// `recent: [batch, m]`. Returns how many were reseeded.
    pub fn reseed_dead<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore<T>,
        recent: &Tensor<T>,
        rng: &mut R,
    ) -> Result<usize> {
        self.check_width(recent.cols())?;
        if recent.rows() == 0 || store.is_frozen(self.codes) {
            return Ok(0);
        }
        let (d, l) = (self.code_dim, self.codes_per_group);
        let mut reseeded = 0;
        for k in 0..self.groups * l {
            if self.clock.saturating_sub(self.last_used[k]) >= self.dead_window {
                let gi = k / l;
                let r = rng.random_range(0..recent.rows());
                let seg = recent.row(r)[gi * d..(gi + 1) * d].to_vec();
                self.set_code(store, k, &seg);
                self.last_used[k] = self.clock;
                reseeded += 1;
            }
        }
        Ok(reseeded)
    }

    /// `L^G` as an exact decimal string.
    pub fn expressible_states(&self) -> String {
        expressible_states(self.codes_per_group, self.groups)
    }

    /// `group,index,usage,v0,...` with one row per code.
    pub fn to_csv(&self, store: &ParamStore<T>) -> String {
        let mut out = String::from("group,index,usage");
        for c in 0..self.code_dim {
            let _ = write!(out, ",v{c}");
        }
        out.push('\n');
        let table = store.value(self.codes);
        for k in 0..self.groups * self.codes_per_group {
            let _ = write!(out, "{},{},{}", k / self.codes_per_group, k % self.codes_per_group, self.usage[k]);
            for x in table.row(k) {
                let _ = write!(out, ",{:.8e}", x.to_f64c());
            }
            out.push('\n');
        }
        out
    }

    /// Statistics other than the code vectors, which live in the store.
    pub fn to_records(&self, prefix: &str) -> Vec<Record> {
        let n = self.ema_count.len();
        vec![
            Record::from_u64s(format!("{prefix}usage"), &self.usage),
            Record::from_u64s(format!("{prefix}window_usage"), &self.window_usage),
            Record::from_u64s(format!("{prefix}last_used"), &self.last_used),
            Record::from_u64s(format!("{prefix}clock"), &[self.clock, self.initialized as u64]),
            Record::from_tensor(
                format!("{prefix}ema_count"),
                &Tensor::matrix(n, 1, self.ema_count.clone()).expect("sized"),
            ),
            Record::from_tensor(
                format!("{prefix}ema_sum"),
                &Tensor::matrix(n, self.code_dim, self.ema_sum.clone()).expect("sized"),
            ),
        ]
    }

    pub fn load_records(&mut self, prefix: &str, records: &[Record]) -> Result<()> {
        let n = self.usage.len();
        let u64s = |name: &str, len: usize| -> Result<Vec<u64>> {
            let v = checkpoint::find(records, &format!("{prefix}{name}"))?.to_u64s()?;
            if v.len() != len {
                return Err(Error::contract(format!("checkpoint `{prefix}{name}` has {} entries, expected {len}", v.len())));
            }
            Ok(v)
        };
        self.usage = u64s("usage", n)?;
        self.window_usage = u64s("window_usage", n)?;
        self.last_used = u64s("last_used", n)?;
        let clock = u64s("clock", 2)?;
        self.clock = clock[0];
        self.initialized = clock[1] != 0;
        self.ema_count = checkpoint::find(records, &format!("{prefix}ema_count"))?
            .to_tensor(&[n, 1])?
            .into_data();
        self.ema_sum = checkpoint::find(records, &format!("{prefix}ema_sum"))?
            .to_tensor(&[n, self.code_dim])?
            .into_data();
        Ok(())
    }
}

/// `codes_per_group ^ groups`, exact.
pub fn expressible_states(codes_per_group: usize, groups: usize) -> String {
    BigUint::from(codes_per_group)
        .pow(groups as u32)
        .to_string()
}
