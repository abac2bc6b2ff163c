//! Run configuration, replay, model assembly, the three-stage trainer and
//! the stage-level entry points that write run artifacts.

mod config;
mod model;
mod replay;
mod run;
mod trainer;

pub use config::{config_from_partial, RunConfig};
pub use model::{Encoder, Model};
pub use replay::{Pair, ReplayBuffer, Transition};
pub use run::{
    embedding_table, eval_checkpoint, run_all, run_finetune, run_pretrain_bottleneck, run_pretrain_encoder, RunSummary,
    CHECKPOINT, STAGE1_CHECKPOINT, STAGE2_CHECKPOINT, SUMMARY,
};
pub use trainer::{argmax, EvalEpisode, Sinks, Stage, Trainer, UpdateLog, CORNERS};
