//! Learning and data-free unlearning of whole tasks on a [`HypernetState`].
//!
//! Learning trains φ and the new task embedding on cross-entropy plus
//! `β · L_reg`, where `L_reg` keeps the generations of every previously
//! learned task (including unlearned ones) close to a snapshot taken before
//! the call. Unlearning never sees task data: it pulls the forget task's
//! generated parameters towards Gaussian noise while the same regularizer
//! anchors the remaining tasks, updating φ only.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::hypernet::{
    random_embedding, GeneratedParams, HypernetState, TaskEmbedding, TaskId, TaskStatus,
};
use crate::mainnet;
use crate::nn::{self, AdamState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnConfig {
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(format!("invalid learn config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseStrategy {
    #[default]
    GaussianAvg,
    FixedNoise,
    NormReduce,
    DiscardEmbedding,
}

impl NoiseStrategy {
    pub const ALL: [NoiseStrategy; 4] = [
        NoiseStrategy::GaussianAvg,
        NoiseStrategy::FixedNoise,
        NoiseStrategy::NormReduce,
        NoiseStrategy::DiscardEmbedding,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseStrategy::GaussianAvg => "gaussian_avg",
            NoiseStrategy::FixedNoise => "fixed_noise",
            NoiseStrategy::NormReduce => "norm_reduce",
            NoiseStrategy::DiscardEmbedding => "discard_embedding",
        }
    }
}

impl fmt::Display for NoiseStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnlearnConfig {
    pub gamma: f64,
    pub burn_in: usize,
    pub n_samples: usize,
    pub strategy: NoiseStrategy,
    pub anneal: bool,
    pub anneal_rate: f64,
    pub anneal_floor: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            gamma: 0.01,
            burn_in: 100,
            n_samples: 10,
            strategy: NoiseStrategy::GaussianAvg,
            anneal: true,
            anneal_rate: 0.10,
            anneal_floor: 20,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        let noisy = matches!(self.strategy, NoiseStrategy::GaussianAvg);
        if !(self.gamma >= 0.0)
            || self.burn_in == 0
            || (noisy && self.n_samples == 0)
            || !(0.0..1.0).contains(&self.anneal_rate)
            || !(self.lr > 0.0)
        {
            return Err(Error::Config(format!("invalid unlearn config {self:?}")));
        }
        Ok(())
    }
}

/// Seeded source of standard-normal vectors of dimension `d`. The fixed
/// sample is drawn once, on first use, and reused for the life of the source.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    rng: ChaCha8Rng,
    d: usize,
    fixed: Option<Vec<f64>>,
}

impl NoiseSource {
    pub fn new(seed: u64, d: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            d,
            fixed: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn sample(&mut self) -> Vec<f64> {
        (0..self.d).map(|_| self.rng.sample(StandardNormal)).collect()
    }

    pub fn fixed(&mut self) -> &[f64] {
        if self.fixed.is_none() {
            self.fixed = Some(self.sample());
        }
        self.fixed.as_deref().expect("just set")
    }
}

/// `max(floor, round(current · (1 − rate)))`.
pub fn anneal_burn_in(current: usize, rate: f64, floor: usize) -> usize {
    let next = (current as f64 * (1.0 - rate)).round() as usize;
    next.max(floor)
}

/// Snapshot generations for the anchor tasks; φ* and the anchor embeddings
/// are fixed for the whole call, so these are computed once.
struct Anchors {
    embeddings: Vec<Vec<f64>>,
    targets: Vec<GeneratedParams>,
}

impl Anchors {
    fn collect(state: &HypernetState, ids: &BTreeSet<TaskId>) -> Result<Self> {
        let embeddings: Vec<Vec<f64>> = ids
            .iter()
            .map(|id| state.embedding(*id).map(|e| e.vec.clone()))
            .collect::<Result<_>>()?;
        let refs: Vec<&[f64]> = embeddings.iter().map(Vec::as_slice).collect();
        let targets = if refs.is_empty() {
            Vec::new()
        } else {
            state.snapshot_generate_many(&refs)?
        };
        Ok(Self { embeddings, targets })
    }

    fn len(&self) -> usize {
        self.embeddings.len()
    }
}

/// Squared distance of each current anchor generation to its target,
/// averaged over anchors, with per-anchor output gradients scaled by `weight`.
fn reg_term(current: &[GeneratedParams], anchors: &Anchors, weight: f64) -> (f64, Vec<Vec<f64>>) {
    if anchors.len() == 0 {
        return (0.0, Vec::new());
    }
    let scale = 1.0 / anchors.len() as f64;
    let mut loss = 0.0;
    let grads = current
        .iter()
        .zip(&anchors.targets)
        .map(|(cur, target)| {
            cur.flat
                .iter()
                .zip(&target.flat)
                .map(|(c, t)| {
                    let d = c - t;
                    loss += scale * d * d;
                    2.0 * weight * scale * d
                })
                .collect()
        })
        .collect();
    (loss, grads)
}

struct StepGrads {
    loss: f64,
    phi: Vec<f64>,
    embedding: Vec<f64>,
    chunks: Vec<Vec<f64>>,
}

fn learning_step(
    state: &HypernetState,
    e_t: &[f64],
    anchors: &Anchors,
    x: &[f64],
    y: &[usize],
    beta: f64,
) -> Result<StepGrads> {
    let mut embs: Vec<&[f64]> = vec![e_t];
    embs.extend(anchors.embeddings.iter().map(Vec::as_slice));
    let pass = state.forward_many(&embs)?;
    let (ce, d_theta) = mainnet::loss_and_grad(state.arch(), &pass.outputs[0].flat, x, y)?;
    let (reg, reg_grads) = reg_term(&pass.outputs[1..], anchors, beta);
    let mut d_outputs: Vec<&[f64]> = vec![&d_theta];
    d_outputs.extend(reg_grads.iter().map(Vec::as_slice));
    let grads = state.backward_many(&pass, &d_outputs)?;
    Ok(StepGrads {
        loss: ce + beta * reg,
        phi: grads.phi,
        embedding: grads.embeddings.into_iter().next().expect("task embedding"),
        chunks: grads.chunks,
    })
}

/// Value and gradients (w.r.t. φ and `e_t`) of the learning objective
/// `CE(batch; H(e_t; φ)) + β · L_reg(anchors)` as used by [`learn_task`].
pub fn learning_loss_and_grad(
    state: &HypernetState,
    e_t: &[f64],
    anchors: &BTreeSet<TaskId>,
    x: &[f64],
    y: &[usize],
    beta: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if !anchors.is_empty() && !state.has_snapshot() {
        return Err(Error::MissingSnapshot);
    }
    let anchors = Anchors::collect(state, anchors)?;
    let g = learning_step(state, e_t, &anchors, x, y, beta)?;
    Ok((g.loss, g.phi, g.embedding))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnStats {
    pub steps: usize,
    pub final_loss: f64,
}

pub fn learn_task(
    state: &mut HypernetState,
    task_id: TaskId,
    data: &TaskDataset,
    cfg: &LearnConfig,
) -> Result<LearnStats> {
    cfg.validate()?;
    data.validate()?;
    if let Some(existing) = state.task_embeddings.get(&task_id) {
        if existing.status == TaskStatus::Active {
            return Err(Error::TaskActive(task_id));
        }
    }
    if data.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.train.dim != state.arch().input_dim() || data.classes > state.arch().classes() {
        return Err(Error::Dimension(format!(
            "task {task_id} has dim {} / {} classes, network expects {} / {}",
            data.train.dim,
            data.classes,
            state.arch().input_dim(),
            state.arch().classes()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    state.snapshot();
    let mut e_t = random_embedding(&mut rng, state.config().task_emb_dim);
    let mut anchor_ids = state.reg_set.clone();
    anchor_ids.remove(&task_id);
    let anchors = Anchors::collect(state, &anchor_ids)?;

    let train_chunks = !state.chunks_frozen();
    let mut phi_opt = AdamState::new(state.phi().len(), cfg.lr);
    let mut emb_opt = AdamState::new(e_t.len(), cfg.lr);
    let chunk_len = state.config().chunk_emb_dim * state.config().num_chunks;
    let mut chunk_opt = AdamState::new(chunk_len, cfg.lr);

    let n = data.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut steps = 0;
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let sub = data.train.subset(batch);
            let g = learning_step(state, &e_t, &anchors, &sub.x, &sub.y, cfg.beta)?;
            phi_opt.step(state.phi_mut(), &g.phi)?;
            emb_opt.step(&mut e_t, &g.embedding)?;
            if train_chunks {
                let mut flat: Vec<f64> =
                    state.chunk_embeddings.iter().flat_map(|c| c.vec.iter().copied()).collect();
                let grad: Vec<f64> = g.chunks.concat();
                chunk_opt.step(&mut flat, &grad)?;
                let width = state.config().chunk_emb_dim;
                for (c, vals) in state.chunk_embeddings.iter_mut().zip(flat.chunks_exact(width)) {
                    c.vec.copy_from_slice(vals);
                }
            }
            final_loss = g.loss;
            steps += 1;
        }
    }
    if e_t.iter().any(|v| !v.is_finite()) || state.phi().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameters after learning"));
    }

    state.task_embeddings.insert(
        task_id,
        TaskEmbedding {
            id: task_id,
            vec: e_t,
            trainable: false,
            status: TaskStatus::Active,
        },
    );
    state.reg_set.insert(task_id);
    state.freeze_chunks();
    state.optimizer_state = phi_opt;
    Ok(LearnStats { steps, final_loss })
}

/// `(1/n) Σ ‖θ − z_i‖²` for `n` fresh noise draws, and its gradient `2(θ − z̄)`.
fn gaussian_forget(theta: &[f64], noise: &mut NoiseSource, n: usize) -> Result<(f64, Vec<f64>)> {
    if noise.dim() != theta.len() {
        return Err(Error::Dimension(format!(
            "noise dim {} vs {} parameters",
            noise.dim(),
            theta.len()
        )));
    }
    let mut mean_z = vec![0.0; theta.len()];
    let mut loss = 0.0;
    for _ in 0..n {
        let z = noise.sample();
        loss += nn::mse_to_target(theta, &z)? / n as f64;
        for (m, v) in mean_z.iter_mut().zip(&z) {
            *m += v / n as f64;
        }
    }
    let grad = theta.iter().zip(&mean_z).map(|(t, z)| 2.0 * (t - z)).collect();
    Ok((loss, grad))
}

/// Forget objective for one strategy: value, gradient w.r.t. θ_f, and the
/// weights applied to it and to `L_reg`.
fn strategy_terms(
    strategy: NoiseStrategy,
    theta: &[f64],
    noise: &mut NoiseSource,
    n: usize,
    gamma: f64,
) -> Result<(f64, Vec<f64>, f64, f64)> {
    Ok(match strategy {
        NoiseStrategy::GaussianAvg => {
            let (l, g) = gaussian_forget(theta, noise, n)?;
            (l, g, gamma, 1.0)
        }
        NoiseStrategy::NormReduce => {
            let l = theta.iter().map(|t| t * t).sum();
            (l, theta.iter().map(|t| 2.0 * t).collect(), gamma, 1.0)
        }
        NoiseStrategy::FixedNoise => {
            if noise.dim() != theta.len() {
                return Err(Error::Dimension("fixed noise dimension".into()));
            }
            let z = noise.fixed();
            let l = nn::mse_to_target(theta, z)?;
            let g = theta.iter().zip(z).map(|(t, z)| 2.0 * (t - z)).collect();
            (l, g, 1.0, gamma)
        }
        NoiseStrategy::DiscardEmbedding => (0.0, vec![0.0; theta.len()], 0.0, 0.0),
    })
}

/// Average squared distance of `H(e_f; φ)` to `n` fresh standard-normal draws.
pub fn forget_loss(state: &HypernetState, e_f: &[f64], noise: &mut NoiseSource, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("need at least one noise sample".into()));
    }
    let theta = state.generate_vec(e_f)?;
    Ok(gaussian_forget(&theta.flat, noise, n)?.0)
}

/// Value of a strategy's forget objective (before weighting).
pub fn strategy_loss(
    strategy: NoiseStrategy,
    state: &HypernetState,
    e_f: &[f64],
    noise: &mut NoiseSource,
    n: usize,
) -> Result<f64> {
    if strategy == NoiseStrategy::DiscardEmbedding {
        return Ok(0.0);
    }
    if strategy == NoiseStrategy::GaussianAvg && n == 0 {
        return Err(Error::Config("need at least one noise sample".into()));
    }
    let theta = state.generate_vec(e_f)?;
    Ok(strategy_terms(strategy, &theta.flat, noise, n, 1.0)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnStats {
    pub iterations: usize,
    pub final_forget_loss: f64,
    pub final_reg_loss: f64,
}

/// Data-free unlearning of `task_id`. The task keeps its (frozen) embedding
/// and stays in the regularization set, so later learning preserves the
/// noise mapping.
pub fn unlearn_task(
    state: &mut HypernetState,
    task_id: TaskId,
    cfg: &UnlearnConfig,
    noise: &mut NoiseSource,
) -> Result<UnlearnStats> {
    cfg.validate()?;
    let status = state.embedding(task_id)?.status;
    if status != TaskStatus::Active || !state.reg_set.contains(&task_id) {
        return Err(Error::TaskNotActive(task_id));
    }

    if cfg.strategy == NoiseStrategy::DiscardEmbedding {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let dim = state.config().task_emb_dim;
        let emb = state.task_embeddings.get_mut(&task_id).expect("checked above");
        emb.vec = random_embedding(&mut rng, dim);
        emb.trainable = false;
        emb.status = TaskStatus::Unlearned;
        return Ok(UnlearnStats {
            iterations: 0,
            final_forget_loss: 0.0,
            final_reg_loss: 0.0,
        });
    }

    state.snapshot();
    let e_f = state.embedding(task_id)?.vec.clone();
    let mut anchor_ids = state.reg_set.clone();
    anchor_ids.remove(&task_id);
    let anchors = Anchors::collect(state, &anchor_ids)?;
    let mut phi_opt = AdamState::new(state.phi().len(), cfg.lr);

    let mut stats = UnlearnStats {
        iterations: 0,
        final_forget_loss: f64::NAN,
        final_reg_loss: 0.0,
    };
    for _ in 0..cfg.burn_in {
        let mut embs: Vec<&[f64]> = vec![&e_f];
        embs.extend(anchors.embeddings.iter().map(Vec::as_slice));
        let pass = state.forward_many(&embs)?;
        let (forget, mut d_forget, w_forget, w_reg) =
            strategy_terms(cfg.strategy, &pass.outputs[0].flat, noise, cfg.n_samples, cfg.gamma)?;
        d_forget.iter_mut().for_each(|g| *g *= w_forget);
        let (reg, reg_grads) = reg_term(&pass.outputs[1..], &anchors, w_reg);
        let mut d_outputs: Vec<&[f64]> = vec![&d_forget];
        d_outputs.extend(reg_grads.iter().map(Vec::as_slice));
        let grads = state.backward_many(&pass, &d_outputs)?;
        phi_opt.step(state.phi_mut(), &grads.phi)?;
        stats.iterations += 1;
        stats.final_forget_loss = forget;
        stats.final_reg_loss = reg;
    }
    if state.phi().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameters after unlearning"));
    }

    let emb = state.task_embeddings.get_mut(&task_id).expect("checked above");
    emb.trainable = false;
    emb.status = TaskStatus::Unlearned;
    state.optimizer_state = phi_opt;
    Ok(stats)
}

/// Test accuracy of the network generated for `task_id`.
pub fn task_accuracy(state: &HypernetState, task_id: TaskId, data: &TaskDataset) -> Result<f64> {
    let theta = state.generate_task(task_id)?;
    mainnet::evaluate_flat(state.arch(), &theta.flat, &data.test)
}
