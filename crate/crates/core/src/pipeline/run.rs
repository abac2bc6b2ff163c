use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use numcore::checkpoint;
use numcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::envs::{Cell, ObsKey};
use crate::exploration::QueueSource;
use crate::metrics::{parse_trajectory, CodebookStats, CoverageRecord, EmbeddingTable};
use crate::{Error, Result};

use super::trainer::{EvalEpisode, Sinks, Stage, Trainer};
use super::RunConfig;

pub const STAGE1_CHECKPOINT: &str = "checkpoint_stage1.bin";
pub const STAGE2_CHECKPOINT: &str = "checkpoint_stage2.bin";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const SUMMARY: &str = "summary.json";

/// What a finished run reports, also written to `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_name: String,
    pub frames: u64,
    pub final_eval: Vec<EvalEpisode>,
    pub mean_return: f64,
    /// Cells visited during pretraining / 36.
    pub pretrain_coverage: f64,
    pub codebook_perplexity: Vec<f64>,
    pub dead_code_fraction: Option<f64>,
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), cfg.to_json())?;
    Ok(())
}

fn fresh(cfg: &RunConfig, dir: &Path) -> Result<Trainer> {
    for name in [STAGE1_CHECKPOINT, STAGE2_CHECKPOINT, CHECKPOINT, SUMMARY] {
        let p = dir.join(name);
        if p.exists() {
            std::fs::remove_file(p)?;
        }
    }
    write_config(cfg, dir)?;
    let mut t = Trainer::new(cfg.clone())?;
    t.attach_sinks(Sinks::create(dir)?);
    Ok(t)
}

fn resume(cfg: &RunConfig, dir: &Path, name: &str) -> Result<Trainer> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path));
    }
    let records = checkpoint::load(&path)?;
    let mut t = Trainer::from_records(cfg.clone(), &records)?;
    t.attach_sinks(Sinks::resume(dir, &Trainer::sink_lengths(&records)?)?);
    write_config(cfg, dir)?;
    Ok(t)
}

/// Steps to `until`, writing stage checkpoints at the boundaries, periodic
/// `checkpoint.bin`, and evaluations during fine-tuning.
fn drive(t: &mut Trainer, dir: &Path, until: u64) -> Result<()> {
    let cfg = t.cfg.clone();
    let boundary = |t: &mut Trainer| -> Result<()> {
        let f = t.frame();
        if f == cfg.stage1_end && !dir.join(STAGE1_CHECKPOINT).exists() {
            t.save(&dir.join(STAGE1_CHECKPOINT))?;
        }
        if f == cfg.stage2_end && !dir.join(STAGE2_CHECKPOINT).exists() {
            t.save(&dir.join(STAGE2_CHECKPOINT))?;
        }
        Ok(())
    };
    boundary(t)?;
    while t.frame() < until {
        if let Err(e) = t.step() {
            if matches!(e, Error::Diverged { .. }) {
                t.save(&dir.join(CHECKPOINT))?;
            }
            return Err(e);
        }
        boundary(t)?;
        let f = t.frame();
        if t.stage_of(f - 1) == Stage::Finetune && (f - cfg.stage2_end) % cfg.eval_every == 0 {
            t.evaluate_and_log()?;
        }
        if f % cfg.checkpoint_every == 0 {
            t.save(&dir.join(CHECKPOINT))?;
        }
    }
    t.flush()
}

/// Stage I into `dir`. A no-op when its checkpoint exists, unless `force`.
pub fn run_pretrain_bottleneck(cfg: &RunConfig, dir: &Path, force: bool) -> Result<()> {
    if !force && dir.join(STAGE1_CHECKPOINT).exists() {
        return Ok(());
    }
    let mut t = fresh(cfg, dir)?;
    drive(&mut t, dir, cfg.stage1_end)?;
    t.save(&dir.join(CHECKPOINT))
}

/// Stage II from the Stage I checkpoint in `dir`.
pub fn run_pretrain_encoder(cfg: &RunConfig, dir: &Path, force: bool) -> Result<()> {
    let out = dir.join(STAGE2_CHECKPOINT);
    if out.exists() {
        if !force {
            return Ok(());
        }
        std::fs::remove_file(&out)?;
    }
    let mut t = resume(cfg, dir, STAGE1_CHECKPOINT)?;
    drive(&mut t, dir, cfg.stage2_end)?;
    t.save(&dir.join(CHECKPOINT))
}

/// Stage III from the Stage II checkpoint in `dir`.
pub fn run_finetune(cfg: &RunConfig, dir: &Path, force: bool) -> Result<RunSummary> {
    if !force {
        if let Some(s) = read_summary(dir)? {
            return Ok(s);
        }
    }
    let mut t = resume(cfg, dir, STAGE2_CHECKPOINT)?;
    finish(&mut t, dir)
}

/// All three stages, resuming from `checkpoint.bin` when one exists.
/// A completed run is returned as is unless `force`.
pub fn run_all(cfg: &RunConfig, dir: &Path, force: bool) -> Result<RunSummary> {
    if !force {
        if let Some(s) = read_summary(dir)? {
            return Ok(s);
        }
    }
    let mut t = if !force && dir.join(CHECKPOINT).exists() {
        resume(cfg, dir, CHECKPOINT)?
    } else {
        fresh(cfg, dir)?
    };
    finish(&mut t, dir)
}

fn finish(t: &mut Trainer, dir: &Path) -> Result<RunSummary> {
    let cfg = t.cfg.clone();
    drive(t, dir, cfg.stage3_end)?;
    t.ensure_finetune_entered()?;
    let evaluated_at_end = cfg.stage3_end > cfg.stage2_end && (cfg.stage3_end - cfg.stage2_end) % cfg.eval_every == 0;
    let final_eval = if evaluated_at_end { t.evaluate()? } else { t.evaluate_and_log()? };
    t.save(&dir.join(CHECKPOINT))?;
    let summary = summarize(t, dir, final_eval)?;
    std::fs::write(dir.join(SUMMARY), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

fn summarize(t: &Trainer, dir: &Path, final_eval: Vec<EvalEpisode>) -> Result<RunSummary> {
    let rows = parse_trajectory(BufReader::new(File::open(dir.join("trajectory.csv"))?))?;
    let stats = t.model.bottleneck.codebook.as_ref().map(CodebookStats::lifetime);
    Ok(RunSummary {
        run_name: t.cfg.run_name(),
        frames: t.frame(),
        mean_return: final_eval.iter().map(|e| e.ret).sum::<f64>() / final_eval.len() as f64,
        final_eval,
        pretrain_coverage: CoverageRecord::from_rows(&rows).fraction(),
        codebook_perplexity: stats.as_ref().map(|s| s.perplexity.clone()).unwrap_or_default(),
        dead_code_fraction: stats.map(|s| s.dead_fraction()),
    })
}

fn read_summary(dir: &Path) -> Result<Option<RunSummary>> {
    let p = dir.join(SUMMARY);
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&std::fs::read_to_string(p)?)?))
}

/// Greedy evaluation of a saved checkpoint.
pub fn eval_checkpoint(cfg: &RunConfig, path: &Path) -> Result<Vec<EvalEpisode>> {
    Trainer::load(cfg.clone(), path)?.evaluate()
}

/// Embeddings of every cell (no goal, no noise seed offset) under the
/// trainer's current weights.
pub fn embedding_table(t: &Trainer, space: QueueSource) -> Result<EmbeddingTable> {
    let env = t.task_env();
    let cells: Vec<Cell> = Cell::all().collect();
    let dim = env.obs_dim();
    let mut data = vec![0.0f32; cells.len() * dim];
    for (c, out) in cells.iter().zip(data.chunks_mut(dim)) {
        let key = ObsKey {
            agent: *c,
            goal: None,
            step: 0,
            noise_seed: 0,
        };
        env.renderer.render_into(&env.layout, &key, out);
    }
    let e = t.model.embed(&Tensor::matrix(cells.len(), dim, data)?)?;
    let groups = t.model.bottleneck.codebook.as_ref().map_or(0, |cb| cb.groups);
    Ok(EmbeddingTable {
        cells,
        codes: e.codes,
        groups,
        values: match space {
            QueueSource::Quantized => e.quantized,
            QueueSource::Continuous => e.continuous,
        },
    })
}
