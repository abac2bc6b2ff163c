//! Cartesian ablation over config keys, averaged over seeds.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use repdib::pipeline::{run_all, RunConfig};

use crate::plot::eval_curve;

pub const SUMMARY: &str = "summary.csv";
pub const MAX_RUNS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

pub fn parse_axis(spec: &str) -> Result<Axis> {
    let (key, values) = spec
        .split_once('=')
        .with_context(|| format!("axis `{spec}` is not key=v1,v2,..."))?;
    let key = key.trim().to_string();
    if key == "seed" {
        bail!("use --seeds to vary the seed");
    }
    let valid = RunConfig::keys();
    if !valid.contains(&key) {
        bail!("unknown key `{key}`; valid keys: {}", valid.join(", "));
    }
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    if values.iter().any(String::is_empty) {
        bail!("axis `{spec}` has an empty value");
    }
    Ok(Axis { key, values })
}

/// Every combination, first axis varying slowest.
pub fn combinations(axes: &[Axis]) -> Vec<Vec<(String, String)>> {
    let mut out = vec![Vec::new()];
    for a in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                a.values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push((a.key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    out
}

fn slug(combo: &[(String, String)]) -> String {
    combo
        .iter()
        .map(|(k, v)| format!("{k}-{}", v.replace(|c: char| !c.is_ascii_alphanumeric() && c != '.', "_")))
        .collect::<Vec<_>>()
        .join("_")
}

/// Mean return of the last evaluation in a run's `eval.csv`.
pub fn final_eval_return(run_dir: &Path) -> Result<f64> {
    let curve = eval_curve(&run_dir.join("eval.csv"))?;
    curve
        .last()
        .map(|&(_, r)| r)
        .with_context(|| format!("{} has no evaluation rows", run_dir.display()))
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs every combination and seed under `out/ablate/`, then writes
/// `out/summary.csv`. Returns the number of combinations.
pub fn ablate(base: &RunConfig, specs: &[String], seeds: &[u64], out: &Path, force: bool, allow_large: bool) -> Result<usize> {
    let axes = specs.iter().map(|s| parse_axis(s)).collect::<Result<Vec<_>>>()?;
    let combos = combinations(&axes);
    let runs = combos.len() * seeds.len();
    if runs > MAX_RUNS && !allow_large {
        bail!("{runs} runs requested; pass --allow-large to run more than {MAX_RUNS}");
    }
    // Validate every configuration before any run starts.
    let mut plan: Vec<(Vec<(String, String)>, Vec<(RunConfig, PathBuf)>)> = Vec::new();
    for combo in combos {
        let overrides: Vec<String> = combo.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let mut cfg = base.with_overrides(&overrides)?;
            cfg.seed = seed;
            cfg.validate().with_context(|| overrides.join(" "))?;
            let dir = out.join("ablate").join(slug(&combo)).join(cfg.run_name());
            per_seed.push((cfg, dir));
        }
        plan.push((combo, per_seed));
    }

    let mut csv = String::new();
    for a in &axes {
        let _ = write!(csv, "{},", a.key);
    }
    csv.push_str("runs,mean_return,std_return,coverage\n");
    for (combo, per_seed) in &plan {
        let mut returns = Vec::new();
        let mut coverage = Vec::new();
        for (cfg, dir) in per_seed {
            let s = run_all(cfg, dir, force)?;
            returns.push(final_eval_return(dir)?);
            coverage.push(s.pretrain_coverage);
        }
        let (mean, std) = mean_std(&returns);
        let (cov, _) = mean_std(&coverage);
        for (_, v) in combo {
            let _ = write!(csv, "{v},");
        }
        let _ = writeln!(csv, "{},{mean},{std},{cov}", returns.len());
    }

    let path = out.join(SUMMARY);
    let same = std::fs::read_to_string(&path).map(|t| t == csv).unwrap_or(false);
    if !same {
        crate::write_new(&path, &csv, force)?;
    }
    Ok(plan.len())
}
