use numcore::{Activation, Adam, AdamConfig, Graph, Linear, Mlp, ParamId, ParamStore, PatchConv, Tensor, Var};
use rand::Rng;

use crate::bottleneck::{Bottleneck, Codebook, Embedded, VibLayer};
use crate::envs::{ObsMode, FRAME_H, FRAME_W};
use crate::objectives::{ObjectiveRegistry, RepresentationObjective, TargetNetwork};
use crate::{Result, SeedRng};

use super::RunConfig;

/// Observation encoder `φ`. Frames go through a patch convolution first.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub conv: Option<PatchConv>,
    pub mlp: Mlp,
}

const PATCH: usize = 8;
const PATCH_CHANNELS: usize = 16;

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        mode: ObsMode,
        obs_dim: usize,
        hidden: usize,
        out: usize,
        rng: &mut R,
    ) -> Self {
        let conv = (mode == ObsMode::Frame).then(|| {
            let channels = obs_dim / (FRAME_H * FRAME_W);
            PatchConv::new(store, "encoder.conv", (channels, FRAME_H, FRAME_W), PATCH, PATCH_CHANNELS, rng)
        });
        let input = conv.as_ref().map_or(obs_dim, PatchConv::out_dim);
        let mlp = Mlp::new(store, "encoder.mlp", &[input, hidden, out], Activation::Relu, rng);
        Self { conv, mlp }
    }

    pub fn forward(&self, g: &Graph<f32>, store: &ParamStore<f32>, x: Var) -> Result<Var> {
        let h = match &self.conv {
            Some(c) => c.forward(g, store, x)?,
            None => x,
        };
        Ok(self.mlp.forward(g, store, h)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = self.conv.iter().flat_map(|c| c.kernel.params()).collect();
        out.extend(self.mlp.params());
        out
    }
}

/// All networks of one run, sharing a single parameter store so that one
/// backward pass and one optimizer step cover every loss term.
pub struct Model {
    pub store: ParamStore<f32>,
    pub encoder: Encoder,
    pub bottleneck: Bottleneck<f32>,
    pub objective: Box<dyn RepresentationObjective<f32>>,
    pub q_net: Mlp,
    pub target: TargetNetwork<f32>,
    pub adam: Adam<f32>,
}

impl Model {
    pub fn new(cfg: &RunConfig, obs_dim: usize, rng: &mut SeedRng) -> Result<Self> {
        let mut store = ParamStore::new();
        let h = cfg.feature_dim;
        let encoder_out = if cfg.vib { 2 * h } else { h };
        let encoder = Encoder::new(&mut store, cfg.obs_mode, obs_dim, cfg.hidden_dim, encoder_out, rng);
        let vib = cfg
            .vib
            .then(|| VibLayer::new(&mut store, "vib", h, cfg.beta_vib, rng));
        let codebook = if cfg.vq {
            let mut cb = Codebook::new(&mut store, "vq", h, cfg.groups, cfg.codes, rng)?;
            cb.commitment = cfg.beta_commit;
            cb.update = cfg.codebook_mode()?;
            cb.dead_window = cfg.dead_code_window;
            Some(cb)
        } else {
            None
        };
        let objective = ObjectiveRegistry::builtin().build(&cfg.objective, &cfg.objective_spec(), &mut store, rng)?;
        let q_net = Mlp::new(&mut store, "q", &[h, cfg.hidden_dim, 4], Activation::Relu, rng);
        let target = TargetNetwork::new(&store, &q_net);
        let adam = Adam::new(adam_config(cfg), &store);
        Ok(Self {
            store,
            encoder,
            bottleneck: Bottleneck { vib, codebook },
            objective,
            q_net,
            target,
            adam,
        })
    }

    /// Deterministic embeddings of raw observations, off-tape.
    pub fn embed(&self, obs: &Tensor<f32>) -> Result<Embedded<f32>> {
        let raw = self.encode(obs)?;
        self.bottleneck.embed(&self.store, &raw)
    }

    /// Encoder outputs (the bottleneck input), off-tape.
    pub fn encode(&self, obs: &Tensor<f32>) -> Result<Tensor<f32>> {
        let g = Graph::inference();
        let x = g.constant(obs.clone())?;
        let z = self.encoder.forward(&g, &self.store, x)?;
        Ok(g.to_tensor(z))
    }

    /// Online Q values for the embeddings of `obs`.
    pub fn q_values(&self, obs: &Tensor<f32>) -> Result<Tensor<f32>> {
        let e = self.embed(obs)?;
        let g = Graph::inference();
        let x = g.constant(e.quantized)?;
        let q = self.q_net.forward(&g, &self.store, x)?;
        Ok(g.to_tensor(q))
    }

    /// Fresh Q weights, target synced, optimizer moments cleared.
    pub fn reset_q<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for layer in &self.q_net.layers {
            reinit(&mut self.store, layer, rng);
        }
        self.target.hard_update(&self.store);
    }

    pub fn reset_optimizer(&mut self, cfg: &RunConfig) {
        self.adam = Adam::new(adam_config(cfg), &self.store);
    }

    pub fn set_encoder_frozen(&mut self, frozen: bool) {
        for id in self.encoder.params() {
            self.store.set_frozen(id, frozen);
        }
    }
}

fn adam_config(cfg: &RunConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    }
}

/// Same scheme as [`Linear::new`], in place.
fn reinit<R: Rng + ?Sized>(store: &mut ParamStore<f32>, layer: &Linear, rng: &mut R) {
    let bound = 1.0 / (layer.in_dim as f64).sqrt();
    for id in layer.params() {
        for w in store.value_mut(id).data_mut() {
            *w = rng.random_range(-bound..bound) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> RunConfig {
        RunConfig {
            feature_dim: 16,
            hidden_dim: 16,
            groups: 4,
            codes: 8,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::new(&tiny(), 36, &mut SeedRng::seed_from_u64(3)).unwrap();
        let b = Model::new(&tiny(), 36, &mut SeedRng::seed_from_u64(3)).unwrap();
        assert_eq!(a.store.to_records(""), b.store.to_records(""));
    }

    #[test]
    fn frame_encoder_shapes() {
        let cfg = RunConfig { obs_mode: ObsMode::Frame, ..tiny() };
        let dim = 4 * FRAME_H * FRAME_W;
        let m = Model::new(&cfg, dim, &mut SeedRng::seed_from_u64(0)).unwrap();
        let obs = Tensor::zeros(&[3, dim]);
        assert_eq!(m.encode(&obs).unwrap().shape(), &[3, 32]);
        assert_eq!(m.q_values(&obs).unwrap().shape(), &[3, 4]);
    }

    #[test]
    fn baseline_embeds_raw_features() {
        let cfg = RunConfig { vib: false, vq: false, ..tiny() };
        let m = Model::new(&cfg, 36, &mut SeedRng::seed_from_u64(0)).unwrap();
        let obs = Tensor::full(&[2, 36], 0.5);
        let e = m.embed(&obs).unwrap();
        assert_eq!(e.quantized, m.encode(&obs).unwrap());
        assert!(e.codes.is_empty());
    }

    #[test]
    fn q_reset_changes_only_q() {
        let mut m = Model::new(&tiny(), 36, &mut SeedRng::seed_from_u64(0)).unwrap();
        let before = m.store.to_records("");
        m.reset_q(&mut SeedRng::seed_from_u64(9));
        let after = m.store.to_records("");
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a == b, !a.name.starts_with("q."), "{}", a.name);
        }
        assert_eq!(m.target.store.to_records(""), m.store.to_records("").into_iter().filter(|r| r.name.starts_with("q.")).collect::<Vec<_>>());
    }
}
