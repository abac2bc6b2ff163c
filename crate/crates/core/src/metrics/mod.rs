//! Diagnostics: state coverage from trajectory logs, codebook health,
//! distance maps in representation space and embedding export.

use std::fmt::Write as _;
use std::io::BufRead;

use numcore::tensor::euclidean_distance;
use numcore::{Real, Tensor};
use serde::Serialize;

use crate::bottleneck::Codebook;
use crate::envs::{Cell, COLS, NUM_CELLS, ROWS};
use crate::{Error, Result};

/// One row of a trajectory log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub episode: u64,
    pub step: u32,
    pub cell: Cell,
    /// `None` on the reset row of an episode.
    pub action: Option<usize>,
    pub reward: f64,
}

/// Reads `episode,step,row,col,action,reward` lines after a header.
pub fn parse_trajectory<R: BufRead>(reader: R) -> Result<Vec<TrajectoryRow>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if i == 0 {
            if line.trim() != "episode,step,row,col,action,reward" {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("unexpected header `{line}`"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 6 fields, found {}", f.len()),
            });
        }
        let bad = |what: &str| Error::Parse {
            line: lineno,
            msg: format!("bad {what} in `{line}`"),
        };
        let row: usize = f[2].parse().map_err(|_| bad("row"))?;
        let col: usize = f[3].parse().map_err(|_| bad("col"))?;
        if row >= ROWS || col >= COLS {
            return Err(bad("cell"));
        }
        let action: i64 = f[4].parse().map_err(|_| bad("action"))?;
        out.push(TrajectoryRow {
            episode: f[0].parse().map_err(|_| bad("episode"))?,
            step: f[1].parse().map_err(|_| bad("step"))?,
            cell: Cell::new(row, col),
            action: usize::try_from(action).ok(),
            reward: f[5].parse().map_err(|_| bad("reward"))?,
        });
    }
    Ok(out)
}

/// Per-cell visit counts over a window of a log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageRecord {
    pub visits: Vec<u64>,
}

impl CoverageRecord {
    pub fn from_rows(rows: &[TrajectoryRow]) -> Self {
        let mut visits = vec![0; NUM_CELLS];
        for r in rows {
            visits[r.cell.index()] += 1;
        }
        Self { visits }
    }

    /// Visited cells / 36.
    pub fn fraction(&self) -> f64 {
        self.visits.iter().filter(|&&v| v > 0).count() as f64 / NUM_CELLS as f64
    }
}

/// Cumulative coverage after each prefix of `rows`.
pub fn coverage_curve(rows: &[TrajectoryRow]) -> Vec<f64> {
    let mut seen = [false; NUM_CELLS];
    let mut n = 0usize;
    rows.iter()
        .map(|r| {
            if !std::mem::replace(&mut seen[r.cell.index()], true) {
                n += 1;
            }
            n as f64 / NUM_CELLS as f64
        })
        .collect()
}

/// Per-group perplexity `exp(H(usage))` and dead-code counts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CodebookStats {
    pub perplexity: Vec<f64>,
    pub dead: Vec<usize>,
    pub codes_per_group: usize,
}

impl CodebookStats {
    /// From row-major `[groups, codes]` counts.
    pub fn from_counts(counts: &[u64], codes_per_group: usize) -> Self {
        let (perplexity, dead) = counts
            .chunks(codes_per_group)
            .map(|c| {
                let total: u64 = c.iter().sum();
                let h = if total == 0 {
                    0.0
                } else {
                    c.iter()
                        .filter(|&&n| n > 0)
                        .map(|&n| {
                            let p = n as f64 / total as f64;
                            -p * p.ln()
                        })
                        .sum::<f64>()
                };
                (h.exp(), c.iter().filter(|&&n| n == 0).count())
            })
            .unzip();
        Self {
            perplexity,
            dead,
            codes_per_group,
        }
    }

    /// Usage since the last window reset (start of the current stage).
    pub fn window<T: Real>(cb: &Codebook<T>) -> Self {
        Self::from_counts(cb.window_usage(), cb.codes_per_group)
    }

    /// Usage over the codebook's whole life.
    pub fn lifetime<T: Real>(cb: &Codebook<T>) -> Self {
        Self::from_counts(cb.usage(), cb.codes_per_group)
    }

    pub fn mean_perplexity(&self) -> f64 {
        self.perplexity.iter().sum::<f64>() / self.perplexity.len().max(1) as f64
    }

    pub fn min_perplexity(&self) -> f64 {
        self.perplexity.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Dead codes over all codes.
    pub fn dead_fraction(&self) -> f64 {
        let total = self.dead.len() * self.codes_per_group;
        self.dead.iter().sum::<usize>() as f64 / total.max(1) as f64
    }
}

/// Euclidean distance from the embedding of `reference` to every cell,
/// divided by the largest, as a 6x6 grid. `embeddings` has one row per cell
/// in index order.
pub fn distance_map<T: Real>(embeddings: &Tensor<T>, reference: Cell) -> Result<Vec<Vec<f64>>> {
    if embeddings.rows() != NUM_CELLS {
        return Err(Error::contract(format!("distance map needs {NUM_CELLS} embeddings, got {}", embeddings.rows())));
    }
    let base = embeddings.row(reference.index());
    let d: Vec<f64> = (0..NUM_CELLS)
        .map(|i| euclidean_distance(base, embeddings.row(i)).to_f64c())
        .collect();
    let max = d.iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { max } else { 1.0 };
    Ok((0..ROWS).map(|r| (0..COLS).map(|c| d[r * COLS + c] / scale).collect()).collect())
}

pub fn distance_map_csv(map: &[Vec<f64>]) -> String {
    let mut out = String::from("row");
    for c in 0..COLS {
        let _ = write!(out, ",c{c}");
    }
    out.push('\n');
    for (r, line) in map.iter().enumerate() {
        let _ = write!(out, "{r}");
        for v in line {
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    }
    out
}

/// Embeddings of a set of cells with their code indices.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub cells: Vec<Cell>,
    /// Row-major `[cells, groups]`; empty without a codebook.
    pub codes: Vec<usize>,
    pub groups: usize,
    pub values: Tensor<f32>,
}

impl EmbeddingTable {
    /// `row,col,code0..,z0..` with 9 significant digits, enough to
    /// reproduce every f32 exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col");
        for g in 0..self.groups {
            let _ = write!(out, ",code{g}");
        }
        for c in 0..self.values.cols() {
            let _ = write!(out, ",z{c}");
        }
        out.push('\n');
        for (i, cell) in self.cells.iter().enumerate() {
            let _ = write!(out, "{},{}", cell.row, cell.col);
            for g in 0..self.groups {
                let _ = write!(out, ",{}", self.codes[i * self.groups + g]);
            }
            for v in self.values.row(i) {
                let _ = write!(out, ",{v:.8e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty embedding file".into(),
        })?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 2 || cols[0] != "row" || cols[1] != "col" {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unexpected header `{header}`"),
            });
        }
        let groups = cols.iter().filter(|c| c.starts_with("code")).count();
        let dim = cols.len() - 2 - groups;
        let (mut cells, mut codes, mut data) = (Vec::new(), Vec::new(), Vec::new());
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            let bad = |msg: String| Error::Parse { line: lineno, msg };
            if f.len() != cols.len() {
                return Err(bad(format!("expected {} fields, found {}", cols.len(), f.len())));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("`{s}`: {e}")));
            let (r, c) = (num(f[0])?, num(f[1])?);
            if r >= ROWS || c >= COLS {
                return Err(bad(format!("cell ({r},{c}) outside the maze")));
            }
            cells.push(Cell::new(r, c));
            for s in &f[2..2 + groups] {
                codes.push(num(s)?);
            }
            for s in &f[2 + groups..] {
                data.push(s.parse::<f32>().map_err(|e| bad(format!("`{s}`: {e}")))?);
            }
        }
        Ok(Self {
            values: Tensor::matrix(cells.len(), dim, data)?,
            cells,
            codes,
            groups,
        })
    }
}
