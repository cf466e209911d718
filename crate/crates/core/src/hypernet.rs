//! Chunked hypernetwork.
//!
//! A shared MLP maps `[task embedding ∥ chunk embedding]` to one chunk of
//! the main network's flat parameter vector. Running every chunk embedding
//! through the MLP and concatenating the outputs (last chunk truncated)
//! yields the full parameter vector for a task.
//!
//! Generated vectors are in the main network's unit-scale parametrization
//! (each layer is multiplied by `sqrt(2 / fan_in)` at run time), so a single
//! output head with unit-variance outputs serves every layer.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, AdamState, Tensor};

pub type TaskId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

pub fn layer_scale(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Layer widths of the generated classifier, `[input, hidden.., classes]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MainArch {
    pub dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl MainArch {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("main network dims {dims:?}")));
        }
        Ok(Self {
            dims,
            activation: Activation::Relu,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn classes(&self) -> usize {
        *self.dims.last().expect("validated non-empty")
    }

    /// `(d_in, d_out)` per layer.
    pub fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.dims.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|(i, o)| i * o + o).sum()
    }

    /// Run-time multiplier `sqrt(2 / fan_in)` of each layer.
    pub fn layer_scales(&self) -> Vec<f64> {
        self.layers().map(|(d_in, _)| layer_scale(d_in)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HypernetConfig {
    pub hidden: Vec<usize>,
    pub task_emb_dim: usize,
    pub chunk_emb_dim: usize,
    pub num_chunks: usize,
}

impl Default for HypernetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 256, 256],
            task_emb_dim: 32,
            chunk_emb_dim: 32,
            num_chunks: 10,
        }
    }
}

impl HypernetConfig {
    pub fn chunk_width(&self, param_count: usize) -> usize {
        param_count.div_ceil(self.num_chunks)
    }

    fn validate(&self) -> Result<()> {
        if self.num_chunks == 0 {
            return Err(Error::Config("num_chunks must be ≥ 1".into()));
        }
        if self.task_emb_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("hypernetwork dims must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Active,
    Unlearned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEmbedding {
    pub id: TaskId,
    pub vec: Vec<f64>,
    pub trainable: bool,
    pub status: TaskStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkEmbedding {
    pub index: usize,
    pub vec: Vec<f64>,
    pub frozen_after_first_task: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedParams {
    pub flat: Vec<f64>,
}

impl GeneratedParams {
    pub fn d(&self) -> usize {
        self.flat.len()
    }
}

/// Plain MLP over a single flat parameter buffer: ReLU on hidden layers,
/// linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<f64>,
}

struct MlpCache {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    rows: usize,
}

impl Mlp {
    fn zeros(dims: Vec<usize>) -> Self {
        let len = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Self {
            dims,
            params: vec![0.0; len],
        }
    }

    fn layer_ranges(&self) -> Vec<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        let mut off = 0;
        self.dims
            .windows(2)
            .map(|w| {
                let wr = off..off + w[0] * w[1];
                let br = wr.end..wr.end + w[1];
                off = br.end;
                (wr, br)
            })
            .collect()
    }

    fn forward(&self, x: Vec<f64>, rows: usize) -> MlpCache {
        let ranges = self.layer_ranges();
        let last = ranges.len() - 1;
        let mut acts = vec![x];
        for (l, (wr, br)) in ranges.into_iter().enumerate() {
            let mut y = nn::affine_rows(&acts[l], rows, &self.params[wr], &self.params[br]);
            if l < last {
                nn::relu_in_place(&mut y);
            }
            acts.push(y);
        }
        MlpCache { acts, rows }
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    fn backward(&self, cache: &MlpCache, dy: Vec<f64>, grad: &mut [f64]) -> Vec<f64> {
        let ranges = self.layer_ranges();
        let mut dy = dy;
        for (l, (wr, br)) in ranges.into_iter().enumerate().rev() {
            if l + 1 < self.dims.len() - 1 {
                nn::relu_backward_in_place(&cache.acts[l + 1], &mut dy);
            }
            let (gw, gb) = grad[wr.start..br.end].split_at_mut(wr.len());
            dy = nn::affine_rows_backward(
                &cache.acts[l],
                cache.rows,
                &self.params[wr],
                &dy,
                gw,
                gb,
                true,
            )
            .expect("dx requested");
        }
        dy
    }

    fn weight_count(&self, layer: usize) -> usize {
        self.dims[layer] * self.dims[layer + 1]
    }
}

/// Frozen copy of the hypernetwork taken before an optimization phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    phi: Mlp,
    chunks: Vec<Vec<f64>>,
}

/// Gradients produced by one backward pass through the hypernetwork.
#[derive(Debug, Clone)]
pub struct HyperGrads {
    pub phi: Vec<f64>,
    /// One entry per embedding passed to the forward pass, in order.
    pub embeddings: Vec<Vec<f64>>,
    pub chunks: Vec<Vec<f64>>,
}

/// Forward activations for a batch of embeddings, kept for the backward pass.
pub struct GenerationPass {
    cache: MlpCache,
    n_embeddings: usize,
    pub outputs: Vec<GeneratedParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypernetState {
    arch: MainArch,
    config: HypernetConfig,
    phi: Mlp,
    pub chunk_embeddings: Vec<ChunkEmbedding>,
    pub task_embeddings: BTreeMap<TaskId, TaskEmbedding>,
    pub optimizer_state: AdamState,
    snapshot: Option<Snapshot>,
    pub reg_set: BTreeSet<TaskId>,
    chunks_frozen: bool,
}

/// Number of random task embeddings used to calibrate the output head.
const HEAD_CALIBRATION_PROBES: usize = 16;

/// Draws a task embedding from `N(0, 1/dim)`.
pub fn random_embedding(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("valid std");
    (0..dim).map(|_| normal.sample(rng)).collect()
}

pub fn init_hypernet(arch: MainArch, config: HypernetConfig, seed: u64) -> Result<HypernetState> {
    config.validate()?;
    let p = arch.param_count();
    let width = config.chunk_width(p);
    if width * config.num_chunks < p {
        return Err(Error::Config("chunks do not cover the parameter vector".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut dims = vec![config.task_emb_dim + config.chunk_emb_dim];
    dims.extend(&config.hidden);
    dims.push(width);
    let mut phi = Mlp::zeros(dims);

    let ranges = phi.layer_ranges();
    let head = ranges.len() - 1;
    for (l, (wr, _)) in ranges.iter().enumerate().take(head) {
        let bound = (6.0 / phi.dims[l] as f64).sqrt();
        let dist = Uniform::new(-bound, bound).expect("valid bounds");
        for w in &mut phi.params[wr.clone()] {
            *w = dist.sample(&mut rng);
        }
    }

    let chunk_embeddings: Vec<ChunkEmbedding> = (0..config.num_chunks)
        .map(|index| ChunkEmbedding {
            index,
            vec: random_embedding(&mut rng, config.chunk_emb_dim),
            frozen_after_first_task: true,
        })
        .collect();

    // Head scale: choose Var(head weight) = 1 / E‖h‖² over the trunk's
    // final activations so each generated position has unit variance.
    let mut state = HypernetState {
        optimizer_state: AdamState::new(phi.params.len(), 1e-3),
        arch,
        config,
        phi,
        chunk_embeddings,
        task_embeddings: BTreeMap::new(),
        snapshot: None,
        reg_set: BTreeSet::new(),
        chunks_frozen: false,
    };
    let probes: Vec<Vec<f64>> = (0..HEAD_CALIBRATION_PROBES)
        .map(|_| random_embedding(&mut rng, state.config.task_emb_dim))
        .collect();
    let refs: Vec<&[f64]> = probes.iter().map(Vec::as_slice).collect();
    let input = state.stack_inputs(&refs, &state.chunk_embeddings_vecs());
    let rows = refs.len() * state.config.num_chunks;
    let trunk_out = state.trunk_activations(input, rows);
    let mean_sq = trunk_out.iter().map(|v| v * v).sum::<f64>() / rows as f64;
    let std = (1.0 / mean_sq.max(1e-12)).sqrt();
    let bound = 3f64.sqrt() * std;
    let dist = Uniform::new(-bound, bound).expect("valid bounds");
    let (wr, _) = state.phi.layer_ranges()[head].clone();
    for w in &mut state.phi.params[wr] {
        *w = dist.sample(&mut rng);
    }
    Ok(state)
}

impl HypernetState {
    pub fn arch(&self) -> &MainArch {
        &self.arch
    }

    pub fn config(&self) -> &HypernetConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    pub fn chunk_width(&self) -> usize {
        self.config.chunk_width(self.param_count())
    }

    /// Flat hypernetwork parameters φ (trunk layers then head).
    pub fn phi(&self) -> &[f64] {
        &self.phi.params
    }

    pub fn phi_mut(&mut self) -> &mut [f64] {
        &mut self.phi.params
    }

    pub fn phi_norm(&self) -> f64 {
        self.phi.params.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn chunks_frozen(&self) -> bool {
        self.chunks_frozen
    }

    pub fn freeze_chunks(&mut self) {
        self.chunks_frozen = true;
    }

    pub fn has_snapshot(&self) -> bool {
        self.snapshot.is_some()
    }

    pub fn embedding(&self, id: TaskId) -> Result<&TaskEmbedding> {
        self.task_embeddings.get(&id).ok_or(Error::UnknownTask(id))
    }

    fn chunk_embeddings_vecs(&self) -> Vec<Vec<f64>> {
        self.chunk_embeddings.iter().map(|c| c.vec.clone()).collect()
    }

    fn stack_inputs(&self, embs: &[&[f64]], chunks: &[Vec<f64>]) -> Vec<f64> {
        let width = self.config.task_emb_dim + self.config.chunk_emb_dim;
        let mut x = Vec::with_capacity(embs.len() * chunks.len() * width);
        for e in embs {
            for c in chunks {
                x.extend_from_slice(e);
                x.extend_from_slice(c);
            }
        }
        x
    }

    fn trunk_activations(&self, input: Vec<f64>, rows: usize) -> Vec<f64> {
        let mut trunk = self.phi.clone();
        trunk.dims.pop();
        let keep: usize = trunk.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        trunk.params.truncate(keep);
        if trunk.dims.len() < 2 {
            return input;
        }
        let mut cache = trunk.forward(input, rows);
        let mut out = cache.acts.pop().expect("at least one layer");
        nn::relu_in_place(&mut out);
        out
    }

    fn check_embedding(&self, e: &[f64]) -> Result<()> {
        if e.len() != self.config.task_emb_dim {
            return Err(Error::Dimension(format!(
                "task embedding has {} entries, expected {}",
                e.len(),
                self.config.task_emb_dim
            )));
        }
        Ok(())
    }

    fn assemble_outputs(&self, raw: &[f64], n_embeddings: usize) -> Vec<GeneratedParams> {
        let p = self.param_count();
        let per = self.config.num_chunks * self.chunk_width();
        (0..n_embeddings)
            .map(|j| GeneratedParams {
                flat: raw[j * per..j * per + p].to_vec(),
            })
            .collect()
    }

    /// Runs several embeddings through the current hypernetwork in one batch.
    pub fn forward_many(&self, embs: &[&[f64]]) -> Result<GenerationPass> {
        for e in embs {
            self.check_embedding(e)?;
        }
        let input = self.stack_inputs(embs, &self.chunk_embeddings_vecs());
        let rows = embs.len() * self.config.num_chunks;
        let cache = self.phi.forward(input, rows);
        let outputs = self.assemble_outputs(cache.acts.last().expect("output layer"), embs.len());
        Ok(GenerationPass {
            cache,
            n_embeddings: embs.len(),
            outputs,
        })
    }

    /// Backpropagates `d_outputs[j] = ∂L/∂θ_j` through a [`GenerationPass`].
    pub fn backward_many(&self, pass: &GenerationPass, d_outputs: &[&[f64]]) -> Result<HyperGrads> {
        if d_outputs.len() != pass.n_embeddings {
            return Err(Error::Dimension("one output gradient per embedding".into()));
        }
        let p = self.param_count();
        let k = self.config.num_chunks;
        let width = self.chunk_width();
        let per = k * width;
        let mut dy = vec![0.0; pass.n_embeddings * per];
        for (j, d) in d_outputs.iter().enumerate() {
            if d.len() != p {
                return Err(Error::Dimension(format!("output gradient length {}", d.len())));
            }
            dy[j * per..j * per + p].copy_from_slice(d);
        }
        let mut phi_grad = vec![0.0; self.phi.params.len()];
        let dx = self.phi.backward(&pass.cache, dy, &mut phi_grad);

        let e_dim = self.config.task_emb_dim;
        let c_dim = self.config.chunk_emb_dim;
        let mut embeddings = vec![vec![0.0; e_dim]; pass.n_embeddings];
        let mut chunks = vec![vec![0.0; c_dim]; k];
        for (row, dxr) in dx.chunks_exact(e_dim + c_dim).enumerate() {
            let (j, c) = (row / k, row % k);
            for (acc, g) in embeddings[j].iter_mut().zip(&dxr[..e_dim]) {
                *acc += g;
            }
            for (acc, g) in chunks[c].iter_mut().zip(&dxr[e_dim..]) {
                *acc += g;
            }
        }
        Ok(HyperGrads {
            phi: phi_grad,
            embeddings,
            chunks,
        })
    }

    pub fn generate_vec(&self, e: &[f64]) -> Result<GeneratedParams> {
        Ok(self.forward_many(&[e])?.outputs.pop().expect("one output"))
    }

    pub fn generate(&self, e: &TaskEmbedding) -> Result<GeneratedParams> {
        self.generate_vec(&e.vec)
    }

    pub fn generate_task(&self, id: TaskId) -> Result<GeneratedParams> {
        self.generate(self.embedding(id)?)
    }

    /// Deep-copies φ and the chunk embeddings as the frozen reference φ*.
    pub fn snapshot(&mut self) {
        self.snapshot = Some(Snapshot {
            phi: self.phi.clone(),
            chunks: self.chunk_embeddings_vecs(),
        });
    }

    /// Generation under the frozen snapshot φ*.
    pub fn snapshot_generate_many(&self, embs: &[&[f64]]) -> Result<Vec<GeneratedParams>> {
        let snap = self.snapshot.as_ref().ok_or(Error::MissingSnapshot)?;
        for e in embs {
            self.check_embedding(e)?;
        }
        let input = self.stack_inputs(embs, &snap.chunks);
        let rows = embs.len() * self.config.num_chunks;
        let cache = snap.phi.forward(input, rows);
        Ok(self.assemble_outputs(cache.acts.last().expect("output layer"), embs.len()))
    }

    pub fn snapshot_generate(&self, e: &[f64]) -> Result<GeneratedParams> {
        Ok(self.snapshot_generate_many(&[e])?.pop().expect("one output"))
    }

    fn anchor_vecs(&self, anchors: &BTreeSet<TaskId>) -> Result<Vec<&[f64]>> {
        anchors
            .iter()
            .map(|id| self.embedding(*id).map(|e| e.vec.as_slice()))
            .collect()
    }

    /// Mean over anchor tasks of `‖H(e; φ*) − H(e; φ)‖²`. Zero for no anchors.
    pub fn reg_loss(&self, anchors: &BTreeSet<TaskId>) -> Result<f64> {
        Ok(self.reg_loss_and_grad(anchors)?.0)
    }

    /// [`reg_loss`](Self::reg_loss) together with its gradient w.r.t. φ.
    pub fn reg_loss_and_grad(&self, anchors: &BTreeSet<TaskId>) -> Result<(f64, Vec<f64>)> {
        if self.snapshot.is_none() {
            return Err(Error::MissingSnapshot);
        }
        if anchors.is_empty() {
            return Ok((0.0, vec![0.0; self.phi.params.len()]));
        }
        let embs = self.anchor_vecs(anchors)?;
        let targets = self.snapshot_generate_many(&embs)?;
        let pass = self.forward_many(&embs)?;
        let scale = 1.0 / embs.len() as f64;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(embs.len());
        for (cur, target) in pass.outputs.iter().zip(&targets) {
            loss += scale * nn::mse_to_target(&cur.flat, &target.flat)?;
            grads.push(
                cur.flat
                    .iter()
                    .zip(&target.flat)
                    .map(|(c, t)| 2.0 * scale * (c - t))
                    .collect::<Vec<f64>>(),
            );
        }
        let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        Ok((loss, self.backward_many(&pass, &refs)?.phi))
    }

    /// Per-layer `(W, b)` tensors of φ, in order.
    pub fn phi_layers(&self) -> Vec<(Tensor, Tensor)> {
        self.phi
            .layer_ranges()
            .into_iter()
            .enumerate()
            .map(|(l, (wr, br))| {
                let d_in = self.phi.dims[l];
                let d_out = self.phi.dims[l + 1];
                debug_assert_eq!(wr.len(), self.phi.weight_count(l));
                (
                    Tensor::new(vec![d_in, d_out], self.phi.params[wr].to_vec()).expect("finite φ"),
                    Tensor::new(vec![d_out], self.phi.params[br].to_vec()).expect("finite φ"),
                )
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            arch: self.arch.clone(),
            dims: self.config.clone(),
            phi_layers: self
                .phi_layers()
                .into_iter()
                .map(|(w, b)| LayerParams {
                    w: w.into_data(),
                    b: b.into_data(),
                })
                .collect(),
            chunk_embeddings: self.chunk_embeddings.clone(),
            task_embeddings: self.task_embeddings.values().cloned().collect(),
            reg_set: self.reg_set.iter().copied().collect(),
            chunks_frozen: self.chunks_frozen,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.dims.validate()?;
        let p = ckpt.arch.param_count();
        let mut dims = vec![ckpt.dims.task_emb_dim + ckpt.dims.chunk_emb_dim];
        dims.extend(&ckpt.dims.hidden);
        dims.push(ckpt.dims.chunk_width(p));
        let mut phi = Mlp::zeros(dims);
        let ranges = phi.layer_ranges();
        if ranges.len() != ckpt.phi_layers.len() {
            return Err(Error::Dimension("checkpoint layer count".into()));
        }
        for ((wr, br), layer) in ranges.into_iter().zip(&ckpt.phi_layers) {
            if layer.w.len() != wr.len() || layer.b.len() != br.len() {
                return Err(Error::Dimension("checkpoint layer shape".into()));
            }
            phi.params[wr].copy_from_slice(&layer.w);
            phi.params[br].copy_from_slice(&layer.b);
        }
        if ckpt.chunk_embeddings.len() != ckpt.dims.num_chunks {
            return Err(Error::Dimension("checkpoint chunk count".into()));
        }
        let task_embeddings: BTreeMap<TaskId, TaskEmbedding> =
            ckpt.task_embeddings.into_iter().map(|e| (e.id, e)).collect();
        if let Some(id) = ckpt.reg_set.iter().find(|id| !task_embeddings.contains_key(id)) {
            return Err(Error::UnknownTask(*id));
        }
        Ok(Self {
            optimizer_state: AdamState::new(phi.params.len(), 1e-3),
            arch: ckpt.arch,
            config: ckpt.dims,
            phi,
            chunk_embeddings: ckpt.chunk_embeddings,
            task_embeddings,
            snapshot: None,
            reg_set: ckpt.reg_set.into_iter().collect(),
            chunks_frozen: ckpt.chunks_frozen,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// JSON checkpoint; field order is arch, dims, φ layers, chunk embeddings,
/// task embeddings, reg_set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub arch: MainArch,
    pub dims: HypernetConfig,
    pub phi_layers: Vec<LayerParams>,
    pub chunk_embeddings: Vec<ChunkEmbedding>,
    pub task_embeddings: Vec<TaskEmbedding>,
    pub reg_set: Vec<TaskId>,
    pub chunks_frozen: bool,
}
