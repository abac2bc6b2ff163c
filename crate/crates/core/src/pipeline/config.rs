use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::bottleneck::CodebookUpdate;
use crate::envs::{Cell, NoiseMode, ObsMode, CENTER, COLS, ROWS};
use crate::exploration::QueueSource;
use crate::objectives::ObjectiveSpec;
use crate::{Error, Result};

/// Every knob of the three-stage pipeline. Serialized as flat JSON whose
/// keys are exactly these field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Task layout for fine-tuning: grid, spiral or loop.
    pub env: String,
    /// Layout used for reward-free pretraining.
    pub pretrain_env: String,
    pub objective: String,
    pub obs_mode: ObsMode,
    pub noise_mode: NoiseMode,
    /// Apply `noise_mode` during pretraining as well.
    pub pretrain_noise: bool,
    pub seed: u64,

    /// Frame at which Stage I ends (m).
    pub stage1_end: u64,
    /// Frame at which Stage II ends (n).
    pub stage2_end: u64,
    /// Frame at which Stage III ends (K).
    pub stage3_end: u64,

    pub batch_size: usize,
    pub gamma: f64,
    pub lr: f64,
    pub tau_q: f64,
    pub feature_dim: usize,
    pub hidden_dim: usize,

    pub vib: bool,
    pub vq: bool,
    pub groups: usize,
    pub codes: usize,
    pub beta_vib: f64,
    pub beta_commit: f64,
    pub codebook_update: String,
    pub ema_decay: f64,
    pub dead_code_window: u64,

    pub knn_k: usize,
    pub queue_capacity: usize,
    /// `quantized` or `continuous`.
    pub queue_source: String,
    /// `collection` (scored and enqueued by the rollout loop, stored with
    /// the transition) or `update` (batch next-states scored and enqueued
    /// at every update).
    pub reward_timing: String,

    pub max_k: usize,
    pub num_prototypes: usize,
    pub proto_tau: f64,
    pub sinkhorn_iters: usize,
    pub proto_ema_target: bool,
    pub contrastive_tau: f64,
    pub contrastive_symmetric: bool,

    pub horizon: u32,
    pub seed_frames: u64,
    pub replay_capacity: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub freeze_encoder_stage1: bool,
    pub freeze_encoder_finetune: bool,
    pub reset_q_finetune: bool,
    /// `center`, or `;`-separated `row,col` cells.
    pub train_goals: String,
    pub log_every: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: "grid".into(),
            pretrain_env: "grid".into(),
            objective: "contrastive".into(),
            obs_mode: ObsMode::Onehot,
            noise_mode: NoiseMode::Off,
            pretrain_noise: false,
            seed: 0,
            stage1_end: 2_000,
            stage2_end: 10_000,
            stage3_end: 20_000,
            batch_size: 128,
            gamma: 0.99,
            lr: 3e-3,
            tau_q: 0.01,
            feature_dim: 128,
            hidden_dim: 128,
            vib: true,
            vq: true,
            groups: 8,
            codes: 50,
            beta_vib: 0.01,
            beta_commit: 0.25,
            codebook_update: "gradient".into(),
            ema_decay: 0.99,
            dead_code_window: 1_000,
            knn_k: 3,
            queue_capacity: 2_048,
            queue_source: "quantized".into(),
            reward_timing: "collection".into(),
            max_k: 8,
            num_prototypes: 16,
            proto_tau: 0.1,
            sinkhorn_iters: 3,
            proto_ema_target: false,
            contrastive_tau: 0.1,
            contrastive_symmetric: false,
            horizon: 200,
            seed_frames: 500,
            replay_capacity: 100_000,
            eps_start: 1.0,
            eps_end: 0.1,
            freeze_encoder_stage1: false,
            freeze_encoder_finetune: false,
            reset_q_finetune: true,
            train_goals: "center".into(),
            log_every: 100,
            eval_every: 2_000,
            checkpoint_every: 1_000,
        }
    }
}

impl RunConfig {
    pub fn keys() -> Vec<String> {
        match serde_json::to_value(RunConfig::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect(),
            _ => unreachable!("config serializes to an object"),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::config("config must be a flat JSON object"))?;
        check_keys(obj.keys())?;
        let cfg: RunConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Applies `key=value` overrides. Values are parsed as JSON when
    /// possible, otherwise taken as strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut map = match serde_json::to_value(self)? {
            Value::Object(m) => m,
            _ => unreachable!(),
        };
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{item}` is not key=value")))?;
            let key = key.trim();
            check_keys(std::iter::once(&key.to_string()))?;
            let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let value = match (&map[key], parsed) {
                (Value::String(_), Value::Number(n)) => Value::String(n.to_string()),
                (Value::String(_), Value::Bool(b)) => Value::String(b.to_string()),
                (_, v) => v,
            };
            map.insert(key.to_string(), value);
        }
        let cfg: RunConfig = serde_json::from_value(Value::Object(map))
            .map_err(|e| Error::config(format!("bad override value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if !(self.stage1_end <= self.stage2_end && self.stage2_end <= self.stage3_end) {
            return bad(format!(
                "stage boundaries must satisfy stage1_end <= stage2_end <= stage3_end, got {} / {} / {}",
                self.stage1_end, self.stage2_end, self.stage3_end
            ));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1)", self.gamma));
        }
        for (name, v) in [("tau_q", self.tau_q), ("ema_decay", self.ema_decay)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        for (name, v) in [("eps_start", self.eps_start), ("eps_end", self.eps_end)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        for (name, v) in [
            ("lr", self.lr),
            ("proto_tau", self.proto_tau),
            ("contrastive_tau", self.contrastive_tau),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.beta_vib < 0.0 || self.beta_commit < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("groups", self.groups),
            ("codes", self.codes),
            ("knn_k", self.knn_k),
            ("queue_capacity", self.queue_capacity),
            ("max_k", self.max_k),
            ("replay_capacity", self.replay_capacity),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if self.vq && self.feature_dim % self.groups != 0 {
            return bad(format!("feature_dim {} not divisible by groups {}", self.feature_dim, self.groups));
        }
        if self.num_prototypes < 2 {
            return bad("num_prototypes must be at least 2".into());
        }
        if self.horizon == 0 || self.log_every == 0 || self.eval_every == 0 || self.checkpoint_every == 0 {
            return bad("horizon, log_every, eval_every and checkpoint_every must be positive".into());
        }
        self.codebook_mode()?;
        self.queue_mode()?;
        self.collect_time_rewards()?;
        self.goal_cells()?;
        Ok(())
    }

    pub fn codebook_mode(&self) -> Result<CodebookUpdate> {
        match self.codebook_update.as_str() {
            "gradient" => Ok(CodebookUpdate::Gradient),
            "ema" => Ok(CodebookUpdate::Ema { decay: self.ema_decay }),
            other => Err(Error::config(format!("codebook_update `{other}`: expected gradient or ema"))),
        }
    }

    pub fn queue_mode(&self) -> Result<QueueSource> {
        match self.queue_source.as_str() {
            "quantized" => Ok(QueueSource::Quantized),
            "continuous" => Ok(QueueSource::Continuous),
            other => Err(Error::config(format!("queue_source `{other}`: expected quantized or continuous"))),
        }
    }

    /// Whether intrinsic rewards are fixed when transitions are collected.
    pub fn collect_time_rewards(&self) -> Result<bool> {
        match self.reward_timing.as_str() {
            "update" => Ok(false),
            "collection" => Ok(true),
            other => Err(Error::config(format!("reward_timing `{other}`: expected update or collection"))),
        }
    }

    pub fn goal_cells(&self) -> Result<Vec<Cell>> {
        if self.train_goals.trim() == "center" {
            return Ok(vec![CENTER]);
        }
        self.train_goals
            .split(';')
            .map(|item| {
                let (r, c) = item
                    .split_once(',')
                    .ok_or_else(|| Error::config(format!("train goal `{item}` is not row,col")))?;
                let parse = |s: &str| s.trim().parse::<usize>().map_err(|e| Error::config(format!("train goal `{item}`: {e}")));
                let (r, c) = (parse(r)?, parse(c)?);
                if r >= ROWS || c >= COLS {
                    return Err(Error::config(format!("train goal ({r},{c}) outside the maze")));
                }
                Ok(Cell::new(r, c))
            })
            .collect()
    }

    pub fn objective_spec(&self) -> ObjectiveSpec {
        ObjectiveSpec {
            latent_dim: self.feature_dim,
            hidden_dim: self.hidden_dim,
            num_actions: 4,
            max_k: self.max_k,
            num_prototypes: self.num_prototypes,
            proto_tau: self.proto_tau,
            sinkhorn_iters: self.sinkhorn_iters,
            proto_ema_target: self.proto_ema_target,
            contrastive_tau: self.contrastive_tau,
            contrastive_symmetric: self.contrastive_symmetric,
        }
    }

    /// `{env}_{objective}_{G}g{L}c_seed{n}`.
    pub fn run_name(&self) -> String {
        format!("{}_{}_{}g{}c_seed{}", self.env, self.objective, self.groups, self.codes, self.seed)
    }

    /// True when neither bottleneck stage is enabled.
    pub fn is_baseline(&self) -> bool {
        !self.vib && !self.vq
    }
}

fn check_keys<'a>(keys: impl IntoIterator<Item = &'a String>) -> Result<()> {
    let valid = RunConfig::keys();
    for k in keys {
        if !valid.contains(k) {
            return Err(Error::config(format!("unknown key `{k}`; valid keys: {}", valid.join(", "))));
        }
    }
    Ok(())
}

/// Merges a partial JSON object over the defaults.
pub fn config_from_partial(partial: &Map<String, Value>) -> Result<RunConfig> {
    check_keys(partial.keys())?;
    RunConfig::from_json(&Value::Object(partial.clone()).to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_maze_table() {
        let c = RunConfig::default();
        assert_eq!((c.batch_size, c.gamma, c.lr, c.tau_q), (128, 0.99, 3e-3, 0.01));
        assert_eq!((c.feature_dim, c.hidden_dim, c.codes, c.groups), (128, 128, 50, 8));
        assert_eq!(c.beta_vib, 0.01);
        assert_eq!(c.stage2_end, 10_000);
        c.validate().unwrap();
    }

    #[test]
    fn json_round_trip_is_exact() {
        let c = RunConfig {
            lr: 0.1 + 0.2,
            seed: u64::MAX >> 12,
            ..Default::default()
        };
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = RunConfig::from_json(r#"{"gamma": 0.9, "bogus": 1}"#).unwrap_err().to_string();
        assert!(err.contains("bogus") && err.contains("batch_size") && err.contains("tau_q"));
        let err = RunConfig::default().with_overrides(&["nope=3"]).unwrap_err().to_string();
        assert!(err.contains("valid keys"));
    }

    #[test]
    fn overrides_parse_types() {
        let c = RunConfig::default()
            .with_overrides(&["groups=16", "env=spiral", "vib=false", "lr=0.001", "objective=proto"])
            .unwrap();
        assert_eq!((c.groups, c.env.as_str(), c.vib, c.lr), (16, "spiral", false, 0.001));
        assert_eq!(c.run_name(), "spiral_proto_16g50c_seed0");
    }

    #[test]
    fn stage_order_is_validated() {
        assert!(RunConfig::default().with_overrides(&["stage1_end=20000"]).is_err());
        assert!(RunConfig::default().with_overrides(&["gamma=1.0"]).is_err());
        assert!(RunConfig::default().with_overrides(&["groups=7"]).is_err());
    }

    #[test]
    fn goal_sets_parse() {
        let c = RunConfig::default().with_overrides(&["train_goals=1,1;4,2"]).unwrap();
        assert_eq!(c.goal_cells().unwrap(), vec![Cell::new(1, 1), Cell::new(4, 2)]);
        assert!(RunConfig::default().with_overrides(&["train_goals=9,9"]).is_err());
    }
}
