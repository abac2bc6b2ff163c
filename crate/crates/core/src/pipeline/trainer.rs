use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use numcore::checkpoint::{self, Record};
use numcore::{Graph, NumError, Tensor};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::envs::{Action, Cell, GoalRule, LayoutRegistry, MazeEnv, MazeState, NoiseMode, ObsKey, Renderer, CENTER, COLS, ROWS};
use crate::exploration::{reward_pipeline, CandidateQueue};
use crate::metrics::CodebookStats;
use crate::objectives::{dqn_loss, total_loss, LossTerms, LossValues, PairBatch, TdBatch};
use crate::{Error, Result, SeedRng};

use super::model::Model;
use super::replay::{ReplayBuffer, Transition};
use super::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    /// Stage I: bottleneck only, random policy.
    Bottleneck = 1,
    /// Stage II: objective + bottleneck + intrinsic-reward DQN.
    Encoder = 2,
    /// Stage III: task DQN through the frozen bottleneck.
    Finetune = 3,
}

/// Greedy evaluation episode from one start cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEpisode {
    pub start: (usize, usize),
    pub ret: f64,
    pub length: u32,
    pub reached: bool,
}

/// Scalars logged after one update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateLog {
    pub losses: LossValues,
    pub intrinsic: f64,
}

pub const CORNERS: [Cell; 4] = [
    Cell::new(0, 0),
    Cell::new(0, COLS - 1),
    Cell::new(ROWS - 1, 0),
    Cell::new(ROWS - 1, COLS - 1),
];

const HEADERS: [(&str, &str); 5] = [
    (
        "metrics.csv",
        "step,stage,loss_total,loss_objective,loss_vq,loss_kl,loss_dqn,codebook_perplexity,dead_codes,intrinsic_reward,epsilon",
    ),
    ("episodes.csv", "episode,stage,start_frame,length,return,reached_goal"),
    ("trajectory.csv", "episode,step,row,col,action,reward"),
    ("trajectory_finetune.csv", "episode,step,row,col,action,reward"),
    ("eval.csv", "frame,start_row,start_col,return,length,reached_goal"),
];

/// CSV outputs of a run. Checkpoints remember each file's length so a
/// resumed run first cuts off rows written after the checkpoint.
pub struct Sinks {
    dir: PathBuf,
    files: Vec<BufWriter<File>>,
}

impl Sinks {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for (name, header) in HEADERS {
            let mut f = BufWriter::new(File::create(dir.join(name))?);
            writeln!(f, "{header}")?;
            files.push(f);
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            files,
        })
    }

    /// Reopens the files, truncated to `lengths`.
    pub fn resume(dir: &Path, lengths: &[u64]) -> Result<Self> {
        let mut files = Vec::new();
        for ((name, header), &len) in HEADERS.iter().zip(lengths) {
            let path = dir.join(name);
            let mut f = OpenOptions::new().create(true).read(true).write(true).truncate(false).open(&path)?;
            let have = f.metadata()?.len();
            if have < len || len == 0 {
                // Lost or foreign file: start it again.
                f.set_len(0)?;
                f.seek(SeekFrom::Start(0))?;
                writeln!(f, "{header}")?;
            } else {
                f.set_len(len)?;
                f.seek(SeekFrom::Start(len))?;
            }
            files.push(BufWriter::new(f));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            files,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn row(&mut self, i: usize, line: std::fmt::Arguments<'_>) -> Result<()> {
        writeln!(self.files[i], "{line}")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<Vec<u64>> {
        let mut out = Vec::new();
        for f in &mut self.files {
            f.flush()?;
            out.push(f.get_mut().stream_position()?);
        }
        Ok(out)
    }
}

/// Sequential three-stage trainer. All mutable state, random streams
/// included, round-trips through [`Trainer::to_records`].
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pretrain_env: MazeEnv,
    task_env: MazeEnv,
    explore: ReplayBuffer,
    task: ReplayBuffer,
    queue: CandidateQueue<f32>,
    env_rng: SeedRng,
    act_rng: SeedRng,
    train_rng: SeedRng,
    frame: u64,
    episodes: u64,
    ep_start: u64,
    ep_return: f64,
    entered: u64,
    last: Option<UpdateLog>,
    sinks: Option<Sinks>,
}

fn stream(seed: u64, id: u64) -> SeedRng {
    let mut r = SeedRng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let layouts = LayoutRegistry::builtin();
        let noise = |on: bool| if on { cfg.noise_mode } else { NoiseMode::Off };
        let pretrain_env = MazeEnv::new(
            layouts.build(&cfg.pretrain_env)?,
            GoalRule::None,
            cfg.horizon,
            Renderer {
                mode: cfg.obs_mode,
                noise: noise(cfg.pretrain_noise),
            },
        )?;
        let goals = cfg.goal_cells()?;
        let rule = if goals.len() == 1 { GoalRule::Fixed(goals[0]) } else { GoalRule::OneOf(goals) };
        let task_env = MazeEnv::new(
            layouts.build(&cfg.env)?,
            rule,
            cfg.horizon,
            Renderer {
                mode: cfg.obs_mode,
                noise: cfg.noise_mode,
            },
        )?;
        if pretrain_env.obs_dim() != task_env.obs_dim() {
            return Err(Error::config(
                "pretraining and task observations differ in width; set pretrain_noise=true when noise is on",
            ));
        }
        let model = Model::new(&cfg, task_env.obs_dim(), &mut stream(cfg.seed, 0))?;
        let queue = CandidateQueue::new(cfg.queue_capacity, cfg.feature_dim)?;
        Ok(Self {
            explore: ReplayBuffer::new(cfg.replay_capacity)?,
            task: ReplayBuffer::new(cfg.replay_capacity)?,
            queue,
            env_rng: stream(cfg.seed, 1),
            act_rng: stream(cfg.seed, 2),
            train_rng: stream(cfg.seed, 3),
            frame: 0,
            episodes: 0,
            ep_start: 0,
            ep_return: 0.0,
            entered: 0,
            last: None,
            sinks: None,
            model,
            pretrain_env,
            task_env,
            cfg,
        })
    }

    pub fn frame(&self) -> u64 {
        self.frame
    }

    pub fn stage(&self) -> Stage {
        self.stage_of(self.frame)
    }

    pub fn stage_of(&self, frame: u64) -> Stage {
        if frame < self.cfg.stage1_end {
            Stage::Bottleneck
        } else if frame < self.cfg.stage2_end {
            Stage::Encoder
        } else {
            Stage::Finetune
        }
    }

    pub fn explore_buffer(&self) -> &ReplayBuffer {
        &self.explore
    }

    pub fn task_buffer(&self) -> &ReplayBuffer {
        &self.task
    }

    pub fn queue(&self) -> &CandidateQueue<f32> {
        &self.queue
    }

    pub fn last_update(&self) -> Option<UpdateLog> {
        self.last
    }

    pub fn attach_sinks(&mut self, sinks: Sinks) {
        self.sinks = Some(sinks);
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(s) = &mut self.sinks {
            s.flush()?;
        }
        Ok(())
    }

    pub fn task_env(&self) -> &MazeEnv {
        &self.task_env
    }

    fn epsilon(&self, stage: Stage) -> f64 {
        let (lo, hi) = match stage {
            Stage::Bottleneck => return 1.0,
            Stage::Encoder => (self.cfg.stage1_end, self.cfg.stage2_end),
            Stage::Finetune => (self.cfg.stage2_end, self.cfg.stage3_end),
        };
        let half = (hi - lo) as f64 / 2.0;
        let frac = if half <= 0.0 { 1.0 } else { ((self.frame - lo) as f64 / half).min(1.0) };
        self.cfg.eps_start + frac * (self.cfg.eps_end - self.cfg.eps_start)
    }

    /// Stage set-up on first entry; also re-applied after loading.
    fn enter(&mut self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Bottleneck => {
                self.model.set_encoder_frozen(self.cfg.freeze_encoder_stage1);
            }
            Stage::Encoder => {
                self.model.set_encoder_frozen(false);
                if let Some(cb) = &mut self.model.bottleneck.codebook {
                    cb.reset_window();
                }
            }
            Stage::Finetune => {
                if let Some(cb) = &self.model.bottleneck.codebook {
                    if !cb.is_trained() {
                        return Err(Error::StageOrder(
                            "fine-tuning needs a trained codebook; run the pretraining stages or disable vq".into(),
                        ));
                    }
                }
                self.model.bottleneck.set_frozen(&mut self.model.store, true);
                self.model.set_encoder_frozen(self.cfg.freeze_encoder_finetune);
                if self.cfg.reset_q_finetune {
                    self.model.reset_q(&mut self.train_rng);
                }
                self.model.reset_optimizer(&self.cfg);
                if let Some(cb) = &mut self.model.bottleneck.codebook {
                    cb.reset_window();
                }
            }
        }
        self.entered = stage as u64;
        Ok(())
    }

    /// Freezing flags for an already-entered stage (they are not stored).
    fn reapply_freezing(&mut self) {
        let stage = self.entered;
        if stage == 0 {
            return;
        }
        self.model.set_encoder_frozen(match stage {
            1 => self.cfg.freeze_encoder_stage1,
            2 => false,
            _ => self.cfg.freeze_encoder_finetune,
        });
        self.model.bottleneck.set_frozen(&mut self.model.store, stage >= 3);
    }

    /// Runs to the end of the current stage if it has not started yet;
    /// used when Stage III has zero frames.
    pub fn ensure_finetune_entered(&mut self) -> Result<()> {
        if self.entered < Stage::Finetune as u64 && self.frame >= self.cfg.stage2_end {
            self.enter(Stage::Finetune)?;
        }
        Ok(())
    }

    /// One environment frame plus at most one gradient update.
    pub fn step(&mut self) -> Result<()> {
        if self.frame >= self.cfg.stage3_end {
            return Err(Error::contract("run already reached its final frame"));
        }
        let stage = self.stage();
        while self.entered < stage as u64 {
            let next = match self.entered {
                0 => Stage::Bottleneck,
                1 => Stage::Encoder,
                _ => Stage::Finetune,
            };
            self.enter(next)?;
        }
        let finetune = stage == Stage::Finetune;
        let env = if finetune { &mut self.task_env } else { &mut self.pretrain_env };
        if env.is_done() {
            let s = env.reset(&mut self.env_rng);
            self.episodes += 1;
            self.ep_start = self.frame;
            self.ep_return = 0.0;
            if let Some(sinks) = &mut self.sinks {
                sinks.row(
                    2 + finetune as usize,
                    format_args!("{},0,{},{},-1,0", self.episodes - 1, s.agent.row, s.agent.col),
                )?;
            }
        }
        let obs = env.state().expect("running").key();
        let action = self.act(stage, &obs)?;
        let env = if finetune { &mut self.task_env } else { &mut self.pretrain_env };
        let (next, out) = env.step(Action::from_index(action)?)?;
        let intrinsic = if !finetune && self.cfg.collect_time_rewards()? {
            let x = self.render(false, &[next.key()]);
            let raw = self.model.encode(&x)?;
            let r = reward_pipeline(&self.model.store, &self.model.bottleneck, &raw, &mut self.queue, self.cfg.knn_k, self.cfg.queue_mode()?)?;
            Some(r[0].reward)
        } else {
            None
        };
        let t = Transition {
            obs,
            action,
            reward: out.reward,
            intrinsic,
            next: next.key(),
            terminated: out.terminated,
            truncated: out.truncated,
            episode: self.episodes - 1,
        };
        if finetune {
            self.task.push(t);
        } else {
            self.explore.push(t);
        }
        self.ep_return += out.reward;
        if let Some(sinks) = &mut self.sinks {
            sinks.row(
                2 + finetune as usize,
                format_args!("{},{},{},{},{},{}", t.episode, next.steps, next.agent.row, next.agent.col, action, out.reward),
            )?;
            if out.done() {
                sinks.row(
                    1,
                    format_args!(
                        "{},{},{},{},{},{}",
                        t.episode,
                        stage as u8,
                        self.ep_start,
                        next.steps,
                        self.ep_return,
                        out.terminated as u8
                    ),
                )?;
            }
        }

        let buffered = if finetune { self.task.len() } else { self.explore.len() };
        let ready = buffered as u64 >= self.cfg.seed_frames.max(self.cfg.batch_size as u64);
        let eps = self.epsilon(stage);
        let frame = self.frame;
        self.frame += 1;
        if ready {
            let log = match stage {
                Stage::Bottleneck => self.update_bottleneck(),
                Stage::Encoder => self.update_encoder(),
                Stage::Finetune => self.update_finetune(),
            }
            .map_err(|e| match e {
                Error::NonFiniteLoss { .. } | Error::Num(NumError::NonFiniteGradient { .. }) => Error::Diverged {
                    frame,
                    source: Box::new(e),
                },
                e => e,
            })?;
            if let Some(log) = log {
                self.last = Some(log);
                if self.frame % self.cfg.log_every == 0 {
                    self.log_metrics(stage, &log, eps)?;
                }
            }
        }
        Ok(())
    }

    fn log_metrics(&mut self, stage: Stage, log: &UpdateLog, eps: f64) -> Result<()> {
        // A frozen codebook records no usage, so fine-tuning rows leave the
        // codebook columns empty, as do runs without one.
        let (perp, dead) = match &self.model.bottleneck.codebook {
            Some(cb) if stage != Stage::Finetune => {
                let s = CodebookStats::window(cb);
                (s.mean_perplexity().to_string(), s.dead.iter().sum::<usize>().to_string())
            }
            _ => (String::new(), String::new()),
        };
        let l = &log.losses;
        let frame = self.frame;
        if let Some(sinks) = &mut self.sinks {
            sinks.row(
                0,
                format_args!(
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    frame,
                    stage as u8,
                    l.total,
                    l.objective,
                    l.discretization,
                    l.gaussian,
                    l.critic,
                    perp,
                    dead,
                    log.intrinsic,
                    eps
                ),
            )?;
        }
        Ok(())
    }

    fn act(&mut self, stage: Stage, obs: &ObsKey) -> Result<usize> {
        if stage == Stage::Bottleneck {
            return Ok(self.act_rng.random_range(0..4));
        }
        let eps = self.epsilon(stage);
        if self.act_rng.random::<f64>() < eps {
            return Ok(self.act_rng.random_range(0..4));
        }
        let x = self.render(stage == Stage::Finetune, &[*obs]);
        Ok(argmax(self.model.q_values(&x)?.row(0)))
    }

    fn render(&self, task: bool, keys: &[ObsKey]) -> Tensor<f32> {
        let env = if task { &self.task_env } else { &self.pretrain_env };
        let dim = env.obs_dim();
        let mut data = vec![0.0f32; keys.len() * dim];
        for (k, out) in keys.iter().zip(data.chunks_mut(dim)) {
            env.renderer.render_into(&env.layout, k, out);
        }
        Tensor::matrix(keys.len(), dim, data).expect("sized")
    }

    /// Encoder plus stochastic bottleneck on `x`; returns the pre-quantizer
    /// output, the quantized output and the loss terms.
    fn bottleneck_pass(&mut self, g: &Graph<f32>, x: Tensor<f32>) -> Result<BottleneckPass> {
        let m = &mut self.model;
        let xv = g.constant(x)?;
        let z = m.encoder.forward(g, &m.store, xv)?;
        let (z_hat, kl) = match &m.bottleneck.vib {
            Some(vib) => {
                let o = vib.forward(g, &m.store, z, &mut self.train_rng)?;
                (o.z_hat, Some(o.kl))
            }
            None => (z, None),
        };
        let (z_q, vq, codes) = match &mut m.bottleneck.codebook {
            Some(cb) => {
                if !cb.is_initialized() {
                    let values = g.to_tensor(z_hat);
                    cb.init_from_data(&mut m.store, &values, &mut self.train_rng)?;
                }
                let q = cb.quantize(g, &m.store, z_hat)?;
                (q.z_q, Some(q.vq_loss), q.codes)
            }
            None => (z_hat, None, Vec::new()),
        };
        Ok(BottleneckPass {
            raw: z,
            z_hat,
            z_q,
            vq,
            kl,
            codes,
        })
    }

    /// Backward, optimizer step and codebook maintenance.
    fn apply(&mut self, g: &Graph<f32>, total: numcore::Var, pass: Option<&BottleneckPass>) -> Result<()> {
        let grads = g.backward(total)?;
        let m = &mut self.model;
        grads.accumulate_into(&mut m.store);
        m.adam.step(&mut m.store)?;
        if let (Some(pass), Some(cb)) = (pass, &mut m.bottleneck.codebook) {
            let values = g.to_tensor(pass.z_hat);
            if matches!(cb.update, crate::bottleneck::CodebookUpdate::Ema { .. }) {
                cb.ema_update(&mut m.store, &values, &pass.codes)?;
            }
            cb.reseed_dead(&mut m.store, &values, &mut self.train_rng)?;
        }
        Ok(())
    }

    fn update_bottleneck(&mut self) -> Result<Option<UpdateLog>> {
        if self.cfg.is_baseline() {
            return Ok(None);
        }
        let idx = self.explore.sample(&mut self.train_rng, self.cfg.batch_size)?;
        let keys: Vec<ObsKey> = idx
            .iter()
            .map(|&i| self.explore.get(i).obs)
            .chain(idx.iter().map(|&i| self.explore.get(i).next))
            .collect();
        let x = self.render(false, &keys);
        let g = Graph::new();
        let pass = self.bottleneck_pass(&g, x)?;
        let terms = LossTerms {
            discretization: pass.vq,
            gaussian: pass.kl,
            ..Default::default()
        };
        let (total, losses) = total_loss(&g, &terms, self.cfg.beta_vib)?;
        self.apply(&g, total, Some(&pass))?;
        Ok(Some(UpdateLog { losses, intrinsic: 0.0 }))
    }

    fn update_encoder(&mut self) -> Result<Option<UpdateLog>> {
        let b = self.cfg.batch_size;
        let max_k = self.model.objective.max_k();
        let pairs = self.explore.sample_pairs(&mut self.train_rng, b, max_k, None)?;
        let keys: Vec<ObsKey> = pairs
            .iter()
            .map(|p| p.anchor)
            .chain(pairs.iter().map(|p| p.target))
            .collect();
        let x = self.render(false, &keys);
        let g = Graph::new();
        let pass = self.bottleneck_pass(&g, x)?;
        let batch = PairBatch {
            anchor: g.slice_rows(pass.z_q, 0, b)?,
            target: g.slice_rows(pass.z_q, b, b)?,
            actions: pairs.iter().map(|p| p.action).collect(),
            ks: pairs.iter().map(|p| p.k).collect(),
        };
        let objective = self.model.objective.loss(&g, &self.model.store, &batch)?;

        // Critic on the intrinsic reward, fed detached deterministic
        // embeddings so only the representation losses shape the encoder.
        let m = &self.model;
        let anchor_raw = g.to_tensor(pass.raw).slice_rows(0, b);
        let q_in = m.bottleneck.embed(&m.store, &anchor_raw)?.quantized;
        let transitions: Vec<Transition> = pairs.iter().map(|p| *self.explore.get(p.index)).collect();
        let next_keys: Vec<ObsKey> = transitions.iter().map(|t| t.next).collect();
        let next_raw = m.encode(&self.render(false, &next_keys))?;
        let next_emb = m.bottleneck.embed(&m.store, &next_raw)?.quantized;
        let next_q = m.target.q_values(&next_emb)?;
        let rewards: Vec<f64> = if self.cfg.collect_time_rewards()? {
            transitions.iter().map(|t| t.intrinsic.unwrap_or(0.0)).collect()
        } else {
            reward_pipeline(&m.store, &m.bottleneck, &next_raw, &mut self.queue, self.cfg.knn_k, self.cfg.queue_mode()?)?
                .iter()
                .map(|r| r.reward)
                .collect()
        };
        let actions: Vec<usize> = transitions.iter().map(|t| t.action).collect();
        let terminals: Vec<bool> = transitions.iter().map(|t| t.terminated).collect();
        let qv = self.model.q_net.forward(&g, &self.model.store, g.constant(q_in)?)?;
        let td = TdBatch {
            actions: &actions,
            rewards: &rewards,
            terminals: &terminals,
            next_q: &next_q,
        };
        let critic = dqn_loss(&g, qv, &td, self.cfg.gamma)?;
        let terms = LossTerms {
            objective: Some(objective),
            discretization: pass.vq,
            gaussian: pass.kl,
            critic: Some(critic),
        };
        let (total, losses) = total_loss(&g, &terms, self.cfg.beta_vib)?;
        self.apply(&g, total, Some(&pass))?;
        let m = &mut self.model;
        m.objective.after_update(&mut m.store);
        m.target.soft_update(&m.store, self.cfg.tau_q);
        Ok(Some(UpdateLog {
            losses,
            intrinsic: rewards.iter().sum::<f64>() / rewards.len() as f64,
        }))
    }

    fn update_finetune(&mut self) -> Result<Option<UpdateLog>> {
        let idx = self.task.sample(&mut self.train_rng, self.cfg.batch_size)?;
        let transitions: Vec<Transition> = idx.iter().map(|&i| *self.task.get(i)).collect();
        let obs: Vec<ObsKey> = transitions.iter().map(|t| t.obs).collect();
        let next: Vec<ObsKey> = transitions.iter().map(|t| t.next).collect();
        let x = self.render(true, &obs);
        let x_next = self.render(true, &next);
        let m = &self.model;
        let next_q = m.target.q_values(&m.embed(&x_next)?.quantized)?;

        let g = Graph::new();
        let z = m.encoder.forward(&g, &m.store, g.constant(x)?)?;
        let mut e = match &m.bottleneck.vib {
            Some(vib) => vib.deterministic(&g, &m.store, z)?,
            None => z,
        };
        if let Some(cb) = &m.bottleneck.codebook {
            let (zq, _) = cb.lookup(&m.store, &g.to_tensor(e))?;
            e = g.straight_through(e, zq)?;
        }
        let q = m.q_net.forward(&g, &m.store, e)?;
        let actions: Vec<usize> = transitions.iter().map(|t| t.action).collect();
        let rewards: Vec<f64> = transitions.iter().map(|t| t.reward).collect();
        let terminals: Vec<bool> = transitions.iter().map(|t| t.terminated).collect();
        let td = TdBatch {
            actions: &actions,
            rewards: &rewards,
            terminals: &terminals,
            next_q: &next_q,
        };
        let critic = dqn_loss(&g, q, &td, self.cfg.gamma)?;
        let terms = LossTerms {
            critic: Some(critic),
            ..Default::default()
        };
        let (total, losses) = total_loss(&g, &terms, self.cfg.beta_vib)?;
        self.apply(&g, total, None)?;
        let m = &mut self.model;
        m.target.soft_update(&m.store, self.cfg.tau_q);
        Ok(Some(UpdateLog { losses, intrinsic: 0.0 }))
    }

    /// Greedy episodes from the four corners to the centre goal on the task
    /// layout. Touches no training state.
    pub fn evaluate(&self) -> Result<Vec<EvalEpisode>> {
        let mut env = self.task_env.clone();
        env.goals = GoalRule::Fixed(CENTER);
        CORNERS
            .iter()
            .enumerate()
            .map(|(i, &start)| {
                env.reset_to(start, Some(CENTER), i as u64);
                let mut ret = 0.0;
                loop {
                    let s = env.state().expect("running");
                    let x = self.render_with(&env, &[s.key()]);
                    let a = argmax(self.model.q_values(&x)?.row(0));
                    let (s, out) = env.step(Action::from_index(a)?)?;
                    ret += out.reward;
                    if out.done() {
                        return Ok(EvalEpisode {
                            start: (start.row, start.col),
                            ret,
                            length: s.steps,
                            reached: out.terminated,
                        });
                    }
                }
            })
            .collect()
    }

    fn render_with(&self, env: &MazeEnv, keys: &[ObsKey]) -> Tensor<f32> {
        let dim = env.obs_dim();
        let mut data = vec![0.0f32; keys.len() * dim];
        for (k, out) in keys.iter().zip(data.chunks_mut(dim)) {
            env.renderer.render_into(&env.layout, k, out);
        }
        Tensor::matrix(keys.len(), dim, data).expect("sized")
    }

    /// Evaluates and appends the episodes to `eval.csv`.
    pub fn evaluate_and_log(&mut self) -> Result<Vec<EvalEpisode>> {
        let eps = self.evaluate()?;
        let frame = self.frame;
        if let Some(sinks) = &mut self.sinks {
            for e in &eps {
                sinks.row(
                    4,
                    format_args!("{},{},{},{},{},{}", frame, e.start.0, e.start.1, e.ret, e.length, e.reached as u8),
                )?;
            }
        }
        Ok(eps)
    }

    pub fn to_records(&mut self) -> Result<Vec<Record>> {
        let sink_lengths = match &mut self.sinks {
            Some(s) => s.flush()?,
            None => vec![0; HEADERS.len()],
        };
        let m = &self.model;
        let mut out = m.store.to_records("model/");
        out.extend(m.target.to_records("target/"));
        out.extend(m.adam.to_records("adam/", &m.store));
        if let Some(cb) = &m.bottleneck.codebook {
            out.extend(cb.to_records("codebook/"));
        }
        out.extend(self.queue.to_records("queue/"));
        out.extend(self.explore.to_records("explore/"));
        out.extend(self.task.to_records("task/"));
        out.push(rng_record("rng/env", &self.env_rng));
        out.push(rng_record("rng/act", &self.act_rng));
        out.push(rng_record("rng/train", &self.train_rng));
        out.push(Record::from_u64s(
            "state/counters",
            &[self.frame, self.episodes, self.ep_start, self.ep_return.to_bits(), self.entered],
        ));
        out.push(Record::from_u64s("state/sinks", &sink_lengths));
        out.push(Record::from_u64s("state/pretrain_env", &env_words(&self.pretrain_env)));
        out.push(Record::from_u64s("state/task_env", &env_words(&self.task_env)));
        let cfg: Vec<u64> = self.cfg.to_json().bytes().map(u64::from).collect();
        out.push(Record::from_u64s("state/config", &cfg));
        Ok(out)
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let records = self.to_records()?;
        let tmp = path.with_extension("bin.tmp");
        checkpoint::save(&tmp, &records)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Rebuilds a trainer from checkpoint records written with the same
    /// configuration (stage boundaries and logging cadence may differ).
    pub fn from_records(cfg: RunConfig, records: &[Record]) -> Result<Self> {
        let saved = checkpoint::find(records, "state/config")?.to_u64s()?;
        let saved: String = saved.into_iter().map(|b| b as u8 as char).collect();
        let saved = RunConfig::from_json(&saved)?;
        let mismatched = config_mismatch(&saved, &cfg);
        if !mismatched.is_empty() {
            return Err(Error::config(format!(
                "checkpoint was written with different settings for: {}",
                mismatched.join(", ")
            )));
        }
        let mut t = Trainer::new(cfg)?;
        let m = &mut t.model;
        m.store.load_records("model/", records)?;
        m.target.load_records("target/", records)?;
        m.adam.load_records("adam/", &m.store, records)?;
        if let Some(cb) = &mut m.bottleneck.codebook {
            cb.load_records("codebook/", records)?;
        }
        t.queue.load_records("queue/", records)?;
        t.explore = ReplayBuffer::load_records("explore/", records)?;
        t.task = ReplayBuffer::load_records("task/", records)?;
        t.env_rng = rng_from(checkpoint::find(records, "rng/env")?)?;
        t.act_rng = rng_from(checkpoint::find(records, "rng/act")?)?;
        t.train_rng = rng_from(checkpoint::find(records, "rng/train")?)?;
        let c = checkpoint::find(records, "state/counters")?.to_u64s()?;
        if c.len() != 5 {
            return Err(Error::contract("checkpoint counters are malformed"));
        }
        t.frame = c[0];
        t.episodes = c[1];
        t.ep_start = c[2];
        t.ep_return = f64::from_bits(c[3]);
        t.entered = c[4];
        restore_env(&mut t.pretrain_env, &checkpoint::find(records, "state/pretrain_env")?.to_u64s()?)?;
        restore_env(&mut t.task_env, &checkpoint::find(records, "state/task_env")?.to_u64s()?)?;
        t.reapply_freezing();
        Ok(t)
    }

    pub fn load(cfg: RunConfig, path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        Self::from_records(cfg, &checkpoint::load(path)?)
    }

    /// Sink lengths stored in a checkpoint, for [`Sinks::resume`].
    pub fn sink_lengths(records: &[Record]) -> Result<Vec<u64>> {
        Ok(checkpoint::find(records, "state/sinks")?.to_u64s()?)
    }
}

struct BottleneckPass {
    raw: numcore::Var,
    z_hat: numcore::Var,
    z_q: numcore::Var,
    vq: Option<numcore::Var>,
    kl: Option<numcore::Var>,
    codes: Vec<usize>,
}

/// First index of the largest value.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Keys whose values may differ between a checkpoint and the config that
/// resumes it.
const RESUMABLE: [&str; 6] = ["stage1_end", "stage2_end", "stage3_end", "log_every", "eval_every", "checkpoint_every"];

fn config_mismatch(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let (Ok(serde_json::Value::Object(a)), Ok(serde_json::Value::Object(b))) =
        (serde_json::to_value(a), serde_json::to_value(b))
    else {
        unreachable!("configs serialize to objects")
    };
    a.iter()
        .filter(|(k, v)| !RESUMABLE.contains(&k.as_str()) && b.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect()
}

fn rng_record(name: &str, rng: &SeedRng) -> Record {
    let seed = rng.get_seed();
    let mut words: Vec<u64> = seed
        .chunks(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let pos = rng.get_word_pos();
    words.extend([rng.get_stream(), pos as u64, (pos >> 64) as u64]);
    Record::from_u64s(name, &words)
}

fn rng_from(r: &Record) -> Result<SeedRng> {
    let w = r.to_u64s()?;
    if w.len() != 7 {
        return Err(Error::contract(format!("rng record `{}` is malformed", r.name)));
    }
    let mut seed = [0u8; 32];
    for (chunk, v) in seed.chunks_mut(8).zip(&w[..4]) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    let mut rng = SeedRng::from_seed(seed);
    rng.set_stream(w[4]);
    rng.set_word_pos(w[5] as u128 | (w[6] as u128) << 64);
    Ok(rng)
}

const NONE: u64 = u64::MAX;

fn env_words(env: &MazeEnv) -> Vec<u64> {
    match (env.is_done(), env.state()) {
        (false, Some(s)) => vec![
            1,
            s.agent.index() as u64,
            s.goal.map_or(NONE, |g| g.index() as u64),
            s.steps as u64,
            s.noise_seed,
        ],
        _ => vec![0, 0, 0, 0, 0],
    }
}

fn restore_env(env: &mut MazeEnv, w: &[u64]) -> Result<()> {
    if w.len() != 5 {
        return Err(Error::contract("checkpoint env state is malformed"));
    }
    if w[0] == 1 {
        env.restore(MazeState {
            agent: Cell::from_index(w[1] as usize),
            goal: (w[2] != NONE).then(|| Cell::from_index(w[2] as usize)),
            steps: w[3] as u32,
            noise_seed: w[4],
        });
    }
    Ok(())
}
