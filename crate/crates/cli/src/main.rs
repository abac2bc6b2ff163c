use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use repdib::envs::{Cell, COLS, ROWS};
use repdib::exploration::QueueSource;
use repdib::metrics::{distance_map, distance_map_csv};
use repdib::pipeline::{self, RunConfig, Trainer};

mod ablate;
mod plot;

#[derive(Args, Clone)]
struct Common {
    /// Flat JSON config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent of the run directories.
    #[arg(long, env = "REPDIB_OUT", default_value = "runs", global = true)]
    out: PathBuf,
    /// Redo work whose artifacts already exist.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Stage I: bottleneck on random-policy data.
    PretrainBottleneck,
    /// Stage II: objective, bottleneck and intrinsic-reward exploration.
    PretrainEncoder,
    /// Stage III: task fine-tuning through the frozen bottleneck.
    Finetune,
    /// All three stages.
    RunAll,
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Embedding of every cell as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Space::Quantized)]
        space: Space,
    },
    /// Normalised embedding distances from one cell to all others.
    DistanceMap {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Space::Quantized)]
        space: Space,
        /// Reference cell as `row,col`.
        #[arg(long, default_value = "0,0")]
        reference: String,
    },
    /// SVG charts of a run's logs.
    Plot {
        /// Column of metrics.csv to chart.
        #[arg(long, default_value = "loss_total")]
        column: String,
    },
    /// One run per combination of axis values, summarised in summary.csv.
    Ablate {
        /// Axes as `key=v1,v2,...`.
        #[arg(required = true, value_name = "KEY=VALUES")]
        axes: Vec<String>,
        /// Seeds averaged per combination, comma separated.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Permit more than 64 runs.
        #[arg(long)]
        allow_large: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Space {
    Quantized,
    Continuous,
}

impl From<Space> for QueueSource {
    fn from(s: Space) -> Self {
        match s {
            Space::Quantized => QueueSource::Quantized,
            Space::Continuous => QueueSource::Continuous,
        }
    }
}

#[derive(Parser)]
#[command(name = "repdib", version, about = "Bottlenecked representation pretraining on mazes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match run(&args.common, &args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

/// Config file, then `--set`, then `--seed`; validated before any file is touched.
fn effective_config(c: &Common) -> Result<RunConfig> {
    let base = match &c.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&c.set)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(c: &Common, cfg: &RunConfig) -> PathBuf {
    c.out.join(cfg.run_name())
}

fn load_trainer(cfg: &RunConfig, dir: &Path, checkpoint: &Option<PathBuf>) -> Result<Trainer> {
    let path = checkpoint.clone().unwrap_or_else(|| dir.join(pipeline::CHECKPOINT));
    Ok(Trainer::load(cfg.clone(), &path)?)
}

fn parse_cell(s: &str) -> Result<Cell> {
    let (r, c) = s.split_once(',').context("reference must be row,col")?;
    let (r, c): (usize, usize) = (r.trim().parse()?, c.trim().parse()?);
    if r >= ROWS || c >= COLS {
        bail!("reference ({r},{c}) outside the maze");
    }
    Ok(Cell::new(r, c))
}

fn run(c: &Common, command: &Command) -> Result<()> {
    if let Command::Ablate {
        axes,
        seeds,
        allow_large,
    } = command
    {
        let cfg = effective_config(c)?;
        let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.clone() };
        let rows = ablate::ablate(&cfg, axes, &seeds, &c.out, c.force, *allow_large)?;
        println!("{} combinations written to {}", rows, c.out.join(ablate::SUMMARY).display());
        return Ok(());
    }
    let cfg = effective_config(c)?;
    let dir = run_dir(c, &cfg);
    match command {
        Command::PretrainBottleneck => {
            pipeline::run_pretrain_bottleneck(&cfg, &dir, c.force)?;
            println!("{}", dir.join(pipeline::STAGE1_CHECKPOINT).display());
        }
        Command::PretrainEncoder => {
            pipeline::run_pretrain_encoder(&cfg, &dir, c.force)?;
            println!("{}", dir.join(pipeline::STAGE2_CHECKPOINT).display());
        }
        Command::Finetune => report(&pipeline::run_finetune(&cfg, &dir, c.force)?)?,
        Command::RunAll => report(&pipeline::run_all(&cfg, &dir, c.force)?)?,
        Command::Eval { checkpoint } => {
            let t = load_trainer(&cfg, &dir, checkpoint)?;
            println!("start_row,start_col,return,length,reached_goal");
            for e in t.evaluate()? {
                println!("{},{},{},{},{}", e.start.0, e.start.1, e.ret, e.length, e.reached as u8);
            }
        }
        Command::ExportEmbeddings { checkpoint, space } => {
            let t = load_trainer(&cfg, &dir, checkpoint)?;
            let table = pipeline::embedding_table(&t, (*space).into())?;
            let path = dir.join("embeddings.csv");
            write_new(&path, &table.to_csv(), c.force)?;
            println!("{}", path.display());
        }
        Command::DistanceMap {
            checkpoint,
            space,
            reference,
        } => {
            let cell = parse_cell(reference)?;
            let t = load_trainer(&cfg, &dir, checkpoint)?;
            let table = pipeline::embedding_table(&t, (*space).into())?;
            let map = distance_map(&table.values, cell)?;
            let path = dir.join(format!("distance_map_{}_{}.csv", cell.row, cell.col));
            write_new(&path, &distance_map_csv(&map), c.force)?;
            println!("{}", path.display());
        }
        Command::Plot { column } => {
            for path in plot::plot_run(&dir, column, c.force)? {
                println!("{}", path.display());
            }
        }
        Command::Ablate { .. } => unreachable!("handled above"),
    }
    Ok(())
}

/// Refuses to replace an existing artifact unless `force`.
pub(crate) fn write_new(path: &Path, contents: &str, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("{} exists; pass --force to replace it", path.display());
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn report(s: &pipeline::RunSummary) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(s)?);
    Ok(())
}
