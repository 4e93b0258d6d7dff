//! Joint optimization of decoder weights and per-image latents with Adam.
//!
//! Each epoch visits every image once in a seeded shuffled order. Per batch the
//! latents are decoded, pose measures are taken from the ground truth (known
//! poses) or estimated on the SO(3) grid, and the batch objective's gradients
//! drive one Adam step on the decoder and on the batch's latents.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{bytes_to_f64s, f64s_to_bytes, sha256_hex, write_container, Container};
use crate::data::ImageStack;
use crate::error::{Error, Result};
use crate::geom::{kabsch_rmsd, so3_grid, Conformation, So3Grid};
use crate::graph::ProteinGraph;
use crate::imaging::ForwardModel;
use crate::loss::{total_objective, BatchItem, ObjectiveContext, R2Mode, RegWeights};
use crate::nn::{Decoder, DecoderParams, GnnConfig, LatentTable, MlpConfig, MlpParams, SkipForm};
use crate::pose::{build_measure_indexed, grid_discrepancies, EslParams, PoseCache, PoseMeasure};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseMode {
    Known,
    Esl,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Decoder architecture; the node count comes from the template.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecoderSpec {
    Gnn {
        latent_dim: usize,
        embed_dim: usize,
        channels: usize,
        layers: usize,
        #[serde(default)]
        skip: SkipForm,
    },
    Mlp {
        latent_dim: usize,
        hidden_layers: usize,
        width: usize,
    },
}

impl DecoderSpec {
    pub fn latent_dim(&self) -> usize {
        match *self {
            DecoderSpec::Gnn { latent_dim, .. } | DecoderSpec::Mlp { latent_dim, .. } => latent_dim,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DecoderSpec::Gnn { .. } => "gnn",
            DecoderSpec::Mlp { .. } => "mlp",
        }
    }

    pub fn param_count(&self, node_count: usize) -> usize {
        match self.zeros(node_count) {
            Ok(d) => d.param_count(),
            Err(_) => 0,
        }
    }

    fn gnn_config(&self, node_count: usize) -> Option<GnnConfig> {
        match *self {
            DecoderSpec::Gnn {
                latent_dim,
                embed_dim,
                channels,
                layers,
                skip,
            } => Some(GnnConfig {
                latent_dim,
                node_count,
                embed_dim,
                channels,
                layers,
                skip,
            }),
            DecoderSpec::Mlp { .. } => None,
        }
    }

    fn mlp_config(&self, node_count: usize) -> Option<MlpConfig> {
        match *self {
            DecoderSpec::Mlp {
                latent_dim,
                hidden_layers,
                width,
            } => Some(MlpConfig {
                latent_dim,
                node_count,
                hidden_layers,
                width,
            }),
            DecoderSpec::Gnn { .. } => None,
        }
    }

    pub fn init(&self, node_count: usize, seed: u64) -> Result<Decoder> {
        match (self.gnn_config(node_count), self.mlp_config(node_count)) {
            (Some(c), _) => Ok(Decoder::Gnn(DecoderParams::init(c, seed)?)),
            (_, Some(c)) => Ok(Decoder::Mlp(MlpParams::init(c, seed)?)),
            _ => unreachable!("one architecture is always selected"),
        }
    }

    pub fn zeros(&self, node_count: usize) -> Result<Decoder> {
        match (self.gnn_config(node_count), self.mlp_config(node_count)) {
            (Some(c), _) => Ok(Decoder::Gnn(DecoderParams::zeros(c)?)),
            (_, Some(c)) => Ok(Decoder::Mlp(MlpParams::zeros(c)?)),
            _ => unreachable!("one architecture is always selected"),
        }
    }
}

fn default_warmup() -> f64 {
    20.0
}

fn default_tolerance() -> f64 {
    1e-6
}

fn default_window() -> usize {
    10
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub decoder: DecoderSpec,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Multiplier on the learning rate of the latents.
    #[serde(default = "one")]
    pub latent_lr_scale: f64,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub pose_mode: PoseMode,
    #[serde(default)]
    pub adam: AdamParams,
    pub reg: RegWeights,
    #[serde(default)]
    pub r2_mode: R2Mode,
    #[serde(default)]
    pub esl: EslParams,
    /// Clip the joint gradient to this L2 norm.
    #[serde(default)]
    pub clip_grad_norm: Option<f64>,
    /// Stop once the mean loss improved by less than this fraction over `convergence_window` epochs.
    #[serde(default = "default_tolerance")]
    pub convergence_tolerance: f64,
    #[serde(default = "default_window")]
    pub convergence_window: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.latent_lr_scale > 0.0 && self.latent_lr_scale.is_finite()) {
            return bad(format!("latent_lr_scale must be positive, got {}", self.latent_lr_scale));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs.is_finite()) {
            return bad(format!("warmup_epochs must be >= 0, got {}", self.warmup_epochs));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad(format!("invalid Adam parameters {a:?}"));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return bad(format!("clip_grad_norm must be positive, got {c}"));
            }
        }
        if self.convergence_window == 0 {
            return bad("convergence_window must be at least 1".into());
        }
        self.reg.validate()?;
        self.esl.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("plain data serializes"))
    }
}

/// Warmup multiplier `min(epoch / warmup, 1)`; `epoch` may be fractional.
pub fn lr_schedule(epoch: f64, warmup_epochs: f64) -> f64 {
    if warmup_epochs <= 0.0 {
        return 1.0;
    }
    (epoch / warmup_epochs).clamp(0.0, 1.0)
}

/// One bias-corrected Adam update of a tensor at step `t ≥ 1`.
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, hp: &AdamParams) {
    let c1 = 1.0 - hp.beta1.powi(t as i32);
    let c2 = 1.0 - hp.beta2.powi(t as i32);
    for k in 0..param.len() {
        let g = grad[k];
        m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * g;
        v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * g * g;
        let m_hat = m[k] / c1;
        let v_hat = v[k] / c2;
        param[k] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

/// Moment estimates for the decoder tensors and, sparsely, for each latent.
///
/// Latents are touched once per epoch, so each keeps its own step count for bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub latent_m: Vec<f64>,
    pub latent_v: Vec<f64>,
    pub latent_steps: Vec<u64>,
}

impl AdamState {
    pub fn new(decoder: &Decoder, latents: &LatentTable) -> Self {
        let shapes: Vec<usize> = decoder.tensors().iter().map(|(_, t)| t.len()).collect();
        Self {
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            latent_m: vec![0.0; latents.as_flat().len()],
            latent_v: vec![0.0; latents.as_flat().len()],
            latent_steps: vec![0; latents.len()],
        }
    }
}

/// Adam step on every decoder tensor. Gradients are checked before anything is modified.
pub fn adam_step(decoder: &mut Decoder, grads: &Decoder, state: &mut AdamState, lr: f64, hp: &AdamParams) -> Result<()> {
    let g = grads.tensors();
    let names: Vec<String> = decoder.tensors().into_iter().map(|(n, _)| n).collect();
    if g.len() != names.len() || g.len() != state.m.len() {
        return Err(Error::Dimension("gradient and parameter tensors differ".into()));
    }
    {
        let p = decoder.tensors();
        for (k, ((name, gt), (_, pt))) in g.iter().zip(&p).enumerate() {
            if gt.len() != pt.len() || state.m[k].len() != pt.len() {
                return Err(Error::Dimension(format!("tensor {name}: gradient length {} vs {}", gt.len(), pt.len())));
            }
            if gt.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of tensor {name}")));
            }
        }
    }
    state.step += 1;
    let t = state.step;
    for (k, p) in decoder.tensors_mut().into_iter().enumerate() {
        adam_update(p, g[k].1, &mut state.m[k], &mut state.v[k], t, lr, hp);
    }
    Ok(())
}

/// Adam step on one latent with its own step counter.
fn latent_step(latents: &mut LatentTable, i: usize, grad: &[f64], state: &mut AdamState, lr: f64, hp: &AdamParams) {
    let d = latents.dim();
    state.latent_steps[i] += 1;
    let t = state.latent_steps[i];
    let range = i * d..(i + 1) * d;
    adam_update(
        latents.get_mut(i),
        grad,
        &mut state.latent_m[range.clone()],
        &mut state.latent_v[range],
        t,
        lr,
        hp,
    );
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based index of the completed epoch.
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_rmsd: Option<f64>,
}

/// Per-epoch metrics including wall time, which is kept out of checkpoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub record: EpochRecord,
    pub wall_time_s: f64,
}

/// Everything needed to continue or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Hash of the configuration that launched the run.
    pub config_hash: String,
    /// Digest of the image payload the run was trained on.
    pub stack_digest: String,
    pub template: Conformation,
    pub edges: Vec<(usize, usize)>,
    pub decoder: Decoder,
    pub latents: LatentTable,
    pub adam: AdamState,
    pub epochs_done: usize,
    pub history: Vec<EpochRecord>,
    pub pose_cache: Option<PoseCache>,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CGCKPT\0\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub config_hash: String,
    pub stack_digest: String,
    pub decoder_kind: String,
    pub param_count: usize,
    pub latent_count: usize,
    pub latent_dim: usize,
    pub residue_count: usize,
    pub edges: Vec<(usize, usize)>,
    pub adam_step: u64,
    pub epochs_done: usize,
    pub history: Vec<EpochRecord>,
    pub pose_cache: Option<PoseCache>,
}

fn u64s_to_bytes(v: &[u64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            stack_digest: self.stack_digest.clone(),
            decoder_kind: self.decoder.kind().into(),
            param_count: self.decoder.param_count(),
            latent_count: self.latents.len(),
            latent_dim: self.latents.dim(),
            residue_count: self.template.residue_count(),
            edges: self.edges.clone(),
            adam_step: self.adam.step,
            epochs_done: self.epochs_done,
            history: self.history.clone(),
            pose_cache: self.pose_cache.clone(),
        };
        let flat = |ts: &[Vec<f64>]| f64s_to_bytes(&ts.concat());
        let params: Vec<f64> = self.decoder.tensors().iter().flat_map(|(_, t)| t.iter().copied()).collect();
        let sections: Vec<(&str, Vec<u8>)> = vec![
            ("template", f64s_to_bytes(&self.template.to_flat())),
            ("params", f64s_to_bytes(&params)),
            ("latents", f64s_to_bytes(self.latents.as_flat())),
            ("adam_m", flat(&self.adam.m)),
            ("adam_v", flat(&self.adam.v)),
            ("latent_m", f64s_to_bytes(&self.adam.latent_m)),
            ("latent_v", f64s_to_bytes(&self.adam.latent_v)),
            ("latent_steps", u64s_to_bytes(&self.adam.latent_steps)),
        ];
        let refs: Vec<(&str, &[u8])> = sections.iter().map(|(n, b)| (*n, b.as_slice())).collect();
        write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &meta, &refs)
    }

    /// Metadata only; parameter payloads are not read.
    pub fn read_meta(path: &Path) -> Result<(CheckpointMeta, Container)> {
        let c = Container::open(path, CHECKPOINT_MAGIC)?;
        if c.version() != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "{}: checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                path.display(),
                c.version()
            )));
        }
        Ok((c.meta()?, c))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (meta, c) = Self::read_meta(path)?;
        let template = Conformation::from_flat(&bytes_to_f64s(&c.read_section("template")?)?)?;
        let mut decoder = meta.config.decoder.zeros(template.residue_count())?;
        let params = bytes_to_f64s(&c.read_section("params")?)?;
        let shapes: Vec<usize> = decoder.tensors().iter().map(|(_, t)| t.len()).collect();
        if params.len() != shapes.iter().sum::<usize>() {
            return Err(Error::Format("parameter payload does not match the architecture".into()));
        }
        let mut offset = 0;
        for t in decoder.tensors_mut() {
            t.copy_from_slice(&params[offset..offset + t.len()]);
            offset += t.len();
        }
        let split = |flat: Vec<f64>| -> Result<Vec<Vec<f64>>> {
            if flat.len() != params.len() {
                return Err(Error::Format("optimizer state does not match the architecture".into()));
            }
            let mut out = Vec::new();
            let mut o = 0;
            for &n in &shapes {
                out.push(flat[o..o + n].to_vec());
                o += n;
            }
            Ok(out)
        };
        let latents = LatentTable::from_flat(meta.latent_dim, bytes_to_f64s(&c.read_section("latents")?)?)?;
        let steps_raw = c.read_section("latent_steps")?;
        let adam = AdamState {
            step: meta.adam_step,
            m: split(bytes_to_f64s(&c.read_section("adam_m")?)?)?,
            v: split(bytes_to_f64s(&c.read_section("adam_v")?)?)?,
            latent_m: bytes_to_f64s(&c.read_section("latent_m")?)?,
            latent_v: bytes_to_f64s(&c.read_section("latent_v")?)?,
            latent_steps: steps_raw
                .chunks_exact(8)
                .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
        };
        if latents.len() != meta.latent_count
            || adam.latent_m.len() != latents.as_flat().len()
            || adam.latent_v.len() != latents.as_flat().len()
            || adam.latent_steps.len() != latents.len()
        {
            return Err(Error::Format("latent payloads disagree with the header".into()));
        }
        Ok(Self {
            config: meta.config,
            config_hash: meta.config_hash,
            stack_digest: meta.stack_digest,
            template,
            edges: meta.edges,
            decoder,
            latents,
            adam,
            epochs_done: meta.epochs_done,
            history: meta.history,
            pose_cache: meta.pose_cache,
        })
    }
}

/// Digest identifying a stack's image payload (the SHA-256 of its stored pixels).
pub fn stack_digest(stack: &ImageStack) -> String {
    let bytes: Vec<u8> = stack
        .images
        .iter()
        .flat_map(|im| im.pixels().iter().flat_map(|&v| (v as f32).to_le_bytes()))
        .collect();
    sha256_hex(&bytes)
}

/// Stateful training loop over one stack.
pub struct Trainer<'a> {
    stack: &'a ImageStack,
    graph: &'a ProteinGraph,
    model: ForwardModel,
    grid: Option<So3Grid>,
    reg: RegWeights,
    state: Checkpoint,
}

impl<'a> Trainer<'a> {
    /// Fresh run: decoder and latents initialized from the config seed.
    pub fn new(
        stack: &'a ImageStack,
        template: &Conformation,
        graph: &'a ProteinGraph,
        config: TrainConfig,
        config_hash: Option<String>,
    ) -> Result<Self> {
        config.validate()?;
        let n = template.residue_count();
        let decoder = config.decoder.init(n, config.seed)?;
        let latents = LatentTable::init(stack.len(), config.decoder.latent_dim(), config.seed ^ 0x9e37_79b9_7f4a_7c15)?;
        let adam = AdamState::new(&decoder, &latents);
        let state = Checkpoint {
            config_hash: config_hash.unwrap_or_else(|| config.hash()),
            config,
            stack_digest: stack_digest(stack),
            template: template.clone(),
            edges: graph.edges().to_vec(),
            decoder,
            latents,
            adam,
            epochs_done: 0,
            history: Vec::new(),
            pose_cache: None,
        };
        Self::from_state(stack, graph, state)
    }

    /// Continues from a checkpoint; the stack must be the one it was trained on.
    pub fn resume(stack: &'a ImageStack, graph: &'a ProteinGraph, checkpoint: Checkpoint) -> Result<Self> {
        if checkpoint.stack_digest != stack_digest(stack) {
            return Err(Error::Config("the checkpoint was trained on a different stack".into()));
        }
        if checkpoint.edges != graph.edges() {
            return Err(Error::Config("the checkpoint was trained with a different graph".into()));
        }
        Self::from_state(stack, graph, checkpoint)
    }

    fn from_state(stack: &'a ImageStack, graph: &'a ProteinGraph, state: Checkpoint) -> Result<Self> {
        if stack.is_empty() {
            return Err(Error::InvalidInput("training needs at least one image".into()));
        }
        let n = state.template.residue_count();
        if graph.node_count() != n || stack.profile.len() != n {
            return Err(Error::Dimension(format!(
                "template has {n} residues, graph {} nodes, profile {} entries",
                graph.node_count(),
                stack.profile.len()
            )));
        }
        if state.latents.len() != stack.len() {
            return Err(Error::Dimension(format!(
                "{} latents for {} images",
                state.latents.len(),
                stack.len()
            )));
        }
        let config = &state.config;
        if config.pose_mode == PoseMode::Known {
            stack.ground_truth().map_err(|_| {
                Error::MissingGroundTruth("known-pose training needs ground-truth poses in the stack".into())
            })?;
        }
        let model = ForwardModel::new(stack.grid, stack.profile.clone(), stack.ctf)?;
        let grid = match config.pose_mode {
            PoseMode::Esl => Some(so3_grid(config.esl.grid_points)?),
            PoseMode::Known => None,
        };
        if let (Some(g), true) = (&grid, config.esl.j0 > config.esl.grid_points) {
            return Err(Error::Config(format!("j0 = {} exceeds the {} grid points", config.esl.j0, g.len())));
        }
        let reg = config.reg.rescaled_for_grid(stack.grid.side());
        Ok(Self {
            stack,
            graph,
            model,
            grid,
            reg,
            state,
        })
    }

    pub fn state(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }

    pub fn epochs_done(&self) -> usize {
        self.state.epochs_done
    }

    pub fn grid(&self) -> Option<&So3Grid> {
        self.grid.as_ref()
    }

    pub fn model(&self) -> &ForwardModel {
        &self.model
    }

    /// Relative loss improvement over the convergence window fell below tolerance.
    pub fn converged(&self) -> bool {
        let h = &self.state.history;
        let w = self.state.config.convergence_window;
        if h.len() <= w {
            return false;
        }
        let old = h[h.len() - 1 - w].mean_loss;
        let new = h[h.len() - 1].mean_loss;
        (old - new) < self.state.config.convergence_tolerance * old.abs()
    }

    pub fn finished(&self) -> bool {
        self.state.epochs_done >= self.state.config.max_epochs || self.converged()
    }

    /// Mean Kabsch RMSD of the decoded conformations against ground truth.
    pub fn mean_rmsd(&self) -> Result<Option<f64>> {
        if self.stack.ground_truth.is_none() {
            return Ok(None);
        }
        let s = &self.state;
        let mut total = 0.0;
        for i in 0..self.stack.len() {
            let x = s.decoder.decode(s.latents.get(i), self.graph, &s.template)?;
            total += kabsch_rmsd(&x, self.stack.gt_conformation(i)?)?;
        }
        Ok(Some(total / self.stack.len() as f64))
    }

    fn order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.state.config.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut idx: Vec<usize> = (0..self.stack.len()).collect();
        idx.shuffle(&mut rng);
        idx
    }

    /// Pose measures for a batch, refreshing the cache every `refresh_every` epochs.
    fn measures(&mut self, batch: &[usize], epoch: usize) -> Result<Vec<PoseMeasure>> {
        let Some(grid) = self.grid.as_ref() else {
            return batch
                .iter()
                .map(|&i| self.stack.gt_pose(i).map(|r| PoseMeasure::delta(*r)))
                .collect();
        };
        let esl = self.state.config.esl;
        let refresh = epoch.is_multiple_of(esl.refresh_every);
        let mut cache = self.state.pose_cache.take().unwrap_or_else(|| PoseCache {
            config_hash: String::new(),
            grid_points: esl.grid_points,
            epoch,
            entries: vec![Vec::new(); self.stack.len()],
        });
        cache.config_hash = self.state.config_hash.clone();
        let s = &self.state;
        let mut fill = || -> Result<Vec<PoseMeasure>> {
            for &i in batch {
                if refresh || cache.entries[i].is_empty() {
                    let x = s.decoder.decode(s.latents.get(i), self.graph, &s.template)?;
                    let d = grid_discrepancies(&self.stack.images[i], &x, grid, &self.model)?;
                    cache.entries[i] = build_measure_indexed(&d, grid, esl.j0, esl.eta)?;
                    cache.epoch = epoch;
                }
            }
            batch.iter().map(|&i| cache.measure(i, grid)).collect()
        };
        let out = fill();
        self.state.pose_cache = Some(cache);
        out
    }

    /// Runs one epoch and records its metrics.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let start = Instant::now();
        let epoch = self.state.epochs_done;
        let order = self.order(epoch);
        let bs = self.state.config.batch_size;
        let batches = order.len().div_ceil(bs);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(bs).enumerate() {
            let measures = self.measures(batch, epoch)?;
            let items: Vec<BatchItem<'_>> = batch
                .iter()
                .zip(&measures)
                .map(|(&i, mu)| BatchItem {
                    index: i,
                    image: &self.stack.images[i],
                    measure: mu,
                })
                .collect();
            let ctx = ObjectiveContext {
                graph: self.graph,
                template: &self.state.template,
                model: &self.model,
                reg: &self.reg,
                r2_mode: self.state.config.r2_mode,
            };
            let mut grad = total_objective(&items, &self.state.decoder, &self.state.latents, &ctx)?;
            if !grad.value.is_finite() {
                let bad: Vec<String> = items
                    .iter()
                    .zip(&grad.per_image)
                    .filter(|(_, v)| !v.is_finite())
                    .map(|(it, v)| {
                        let z = self.state.latents.get(it.index);
                        format!("image {} loss {v} |z| {:.3e}", it.index, z.iter().map(|a| a * a).sum::<f64>().sqrt())
                    })
                    .collect();
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {}, batch {b}: {}",
                    epoch + 1,
                    bad.join("; ")
                )));
            }
            loss_sum += grad.value;

            let cfg = &self.state.config;
            if let Some(max_norm) = cfg.clip_grad_norm {
                let sq: f64 = grad.decoder.tensors().iter().flat_map(|(_, t)| t.iter()).map(|g| g * g).sum::<f64>()
                    + grad.latents.iter().flat_map(|(_, g)| g.iter()).map(|g| g * g).sum::<f64>();
                let norm = sq.sqrt();
                if norm > max_norm {
                    let s = max_norm / norm;
                    for t in grad.decoder.tensors_mut() {
                        t.iter_mut().for_each(|g| *g *= s);
                    }
                    for (_, g) in &mut grad.latents {
                        g.iter_mut().for_each(|v| *v *= s);
                    }
                }
            }
            let lr = cfg.base_lr * lr_schedule(epoch as f64 + b as f64 / batches as f64, cfg.warmup_epochs);
            let latent_lr = lr * cfg.latent_lr_scale;
            let hp = cfg.adam;
            for (i, g) in &grad.latents {
                if let Some(k) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of latent {i} component {k}")));
                }
            }
            adam_step(&mut self.state.decoder, &grad.decoder, &mut self.state.adam, lr, &hp)?;
            for (i, g) in &grad.latents {
                latent_step(&mut self.state.latents, *i, g, &mut self.state.adam, latent_lr, &hp);
            }
        }
        self.state.epochs_done += 1;
        let record = EpochRecord {
            epoch: self.state.epochs_done,
            mean_loss: loss_sum / self.stack.len() as f64,
            mean_rmsd: self.mean_rmsd()?,
        };
        self.state.history.push(record);
        Ok(EpochMetrics {
            record,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs epochs until `max_epochs` or convergence, calling `on_epoch` after each.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&Self, &EpochMetrics) -> Result<()>) -> Result<Vec<EpochMetrics>> {
        let mut out = Vec::new();
        while !self.finished() {
            let m = self.run_epoch()?;
            on_epoch(self, &m)?;
            out.push(m);
        }
        Ok(out)
    }
}

/// Trains from scratch to completion.
pub fn run_training(
    stack: &ImageStack,
    template: &Conformation,
    graph: &ProteinGraph,
    config: TrainConfig,
) -> Result<(Checkpoint, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(stack, template, graph, config, None)?;
    let metrics = trainer.run(|_, _| Ok(()))?;
    Ok((trainer.into_checkpoint(), metrics))
}

/// Metrics CSV with columns `epoch,mean_loss,mean_rmsd,wall_time_s`, preceded by a
/// `# config_hash=...` line. RMSD is blank without ground truth and wall time
/// blank where unknown (epochs run before a resume).
pub fn metrics_csv(config_hash: &str, history: &[EpochRecord], wall_time_s: &[Option<f64>]) -> String {
    let mut s = format!("# config_hash={config_hash}\nepoch,mean_loss,mean_rmsd,wall_time_s\n");
    for (k, r) in history.iter().enumerate() {
        let rmsd = r.mean_rmsd.map(|v| format!("{v:.6}")).unwrap_or_default();
        let wall = wall_time_s.get(k).copied().flatten().map(|w| format!("{w:.3}")).unwrap_or_default();
        s.push_str(&format!("{},{:.9e},{rmsd},{wall}\n", r.epoch, r.mean_loss));
    }
    s
}
