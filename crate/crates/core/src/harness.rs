//! Experiment driver: request sequences, seeded runs, and result artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, PermutationSpec, TaskDataset};
use crate::engine::{self, LearnConfig, NoiseSource, UnlearnConfig};
use crate::error::{Error, Result};
use crate::hypernet::{init_hypernet, random_embedding, HypernetConfig, HypernetState, MainArch, TaskId};
use crate::mainnet;
use crate::metrics::{AccuracyTrace, FinalStatus, Instruction, MetricsReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub instruction: Instruction,
    pub task_id: TaskId,
}

impl std::fmt::Display for Request {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}{}", self.instruction, self.task_id)
    }
}

/// Parses `L<n>` / `U<n>` tokens separated by whitespace, commas, `->`, `→`
/// or `\rightarrow`, then checks that every unlearn follows a matching learn
/// and no task is learned twice while active.
pub fn parse_sequence(text: &str) -> Result<Vec<Request>> {
    let cleaned = text
        .replace("$\\rightarrow$", " ")
        .replace("\\rightarrow", " ")
        .replace("->", " ")
        .replace(['→', ','], " ");
    let mut requests = Vec::new();
    for token in cleaned.split_whitespace() {
        let (head, id) = token.split_at(token.chars().next().map_or(0, char::len_utf8));
        let instruction = match head {
            "L" => Instruction::Learn,
            "U" => Instruction::Unlearn,
            _ => return Err(Error::Sequence(format!("malformed token {token:?}"))),
        };
        let task_id = id
            .parse::<TaskId>()
            .map_err(|_| Error::Sequence(format!("malformed token {token:?}")))?;
        requests.push(Request { instruction, task_id });
    }
    if requests.is_empty() {
        return Err(Error::Sequence("empty sequence".into()));
    }
    validate_sequence(&requests)?;
    Ok(requests)
}

pub fn validate_sequence(requests: &[Request]) -> Result<()> {
    let mut active = BTreeSet::new();
    for (i, r) in requests.iter().enumerate() {
        match r.instruction {
            Instruction::Learn if !active.insert(r.task_id) => {
                return Err(Error::Sequence(format!("request {i}: task {} is already learned", r.task_id)));
            }
            Instruction::Unlearn if !active.remove(&r.task_id) => {
                return Err(Error::Sequence(format!("request {i}: task {} is not learned", r.task_id)));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Renumbers task ids densely in order of first appearance, returning the
/// rewritten sequence and the original → new id map.
pub fn remap_ids(requests: &[Request]) -> (Vec<Request>, BTreeMap<TaskId, TaskId>) {
    let mut map = BTreeMap::new();
    let out = requests
        .iter()
        .map(|r| {
            let next = map.len() as TaskId;
            let id = *map.entry(r.task_id).or_insert(next);
            Request { task_id: id, ..*r }
        })
        .collect();
    (out, map)
}

pub fn strip_unlearning(requests: &[Request]) -> Vec<Request> {
    requests
        .iter()
        .filter(|r| r.instruction == Instruction::Learn)
        .copied()
        .collect()
}

pub fn format_sequence(requests: &[Request]) -> String {
    requests.iter().map(Request::to_string).collect::<Vec<_>>().join(" ")
}

fn sequence_tasks(requests: &[Request]) -> BTreeSet<TaskId> {
    requests.iter().map(|r| r.task_id).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// One Gaussian-blob task per id, seeded by `seed` and the id.
    Synthetic {
        classes: usize,
        dim: usize,
        n_per_class: usize,
        separation: f64,
        seed: u64,
    },
    /// One fixed pixel permutation of an IDX digit set per task id.
    PermutedMnist {
        path: PathBuf,
        n_train: usize,
        n_test: usize,
        seed: u64,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::PermutedMnist {
            path: PathBuf::from("data/mnist-desk"),
            n_train: 2000,
            n_test: 1000,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn input_dim(&self) -> usize {
        match self {
            DatasetSpec::Synthetic { dim, .. } => *dim,
            DatasetSpec::PermutedMnist { .. } => 784,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            DatasetSpec::Synthetic { classes, .. } => *classes,
            DatasetSpec::PermutedMnist { .. } => 10,
        }
    }

    /// Builds the dataset of every listed task.
    pub fn build(&self, tasks: &BTreeSet<TaskId>) -> Result<BTreeMap<TaskId, TaskDataset>> {
        match self {
            DatasetSpec::Synthetic {
                classes,
                dim,
                n_per_class,
                separation,
                seed,
            } => tasks
                .iter()
                .map(|&t| {
                    let mut ds =
                        data::make_synthetic(*classes, *dim, *n_per_class, *separation, mix(*seed, 0, t as u64))?;
                    ds.task_id = t;
                    Ok((t, ds))
                })
                .collect(),
            DatasetSpec::PermutedMnist {
                path,
                n_train,
                n_test,
                seed,
            } => {
                let base = data::load_mnist_dir(path, *n_train, *n_test)?;
                tasks
                    .iter()
                    .map(|&t| {
                        let spec = PermutationSpec::from_seed(base.train.dim, mix(*seed, 1, t as u64));
                        Ok((t, data::make_permuted_with(&base, &spec, t)?))
                    })
                    .collect()
            }
        }
    }
}

/// JSON run configuration; every key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub sequence: String,
    pub remap_ids: bool,
    pub main_hidden: Vec<usize>,
    pub hypernet: HypernetConfig,
    pub learn: LearnConfig,
    pub unlearn: UnlearnConfig,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub compare_only_learning: bool,
    pub mia: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            sequence: "L0 L1 U0 L2 L3 L4 U1".into(),
            remap_ids: false,
            main_hidden: vec![100],
            hypernet: HypernetConfig::default(),
            learn: LearnConfig::default(),
            unlearn: UnlearnConfig::default(),
            seeds: vec![0, 1, 2],
            out_dir: None,
            compare_only_learning: false,
            mia: true,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn arch(&self) -> Result<MainArch> {
        let mut dims = vec![self.dataset.input_dim()];
        dims.extend(&self.main_hidden);
        dims.push(self.dataset.classes());
        MainArch::new(dims)
    }

    pub fn requests(&self) -> Result<Vec<Request>> {
        let parsed = parse_sequence(&self.sequence)?;
        Ok(if self.remap_ids { remap_ids(&parsed).0 } else { parsed })
    }

    pub fn validate(&self) -> Result<()> {
        self.learn.validate()?;
        self.unlearn.validate()?;
        self.arch()?;
        self.requests()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer over `(seed, stream, index)`.
pub fn mix(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnTiming {
    pub op_index: usize,
    pub task_id: TaskId,
    pub burn_in: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub trace: AccuracyTrace,
    pub report: MetricsReport,
    /// Hypernetwork parameter norm ‖φ‖ after every operation.
    pub phi_norms: Vec<f64>,
    pub unlearn_times: Vec<UnlearnTiming>,
}

impl SeedResult {
    /// Equality ignoring wall-clock timings.
    pub fn same_outcome(&self, other: &SeedResult) -> bool {
        self.seed == other.seed
            && self.trace == other.trace
            && self.report == other.report
            && self.phi_norms == other.phi_norms
            && self.unlearn_times.len() == other.unlearn_times.len()
            && self
                .unlearn_times
                .iter()
                .zip(&other.unlearn_times)
                .all(|(a, b)| (a.op_index, a.task_id, a.burn_in) == (b.op_index, b.task_id, b.burn_in))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and population standard deviation; `None` if any value is absent.
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Option<Stat> {
        let v: Vec<f64> = values.into_iter().collect::<Option<_>>()?;
        if v.is_empty() {
            return None;
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        Some(Stat { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub ra: Option<Stat>,
    pub fa: Option<Stat>,
    pub spill_mean: Option<Stat>,
    pub relapse_mean: Option<Stat>,
    pub relapse_max: Option<Stat>,
    pub mia: Option<Stat>,
    pub unlearn_seconds: Option<Stat>,
}

impl Aggregate {
    pub fn from_seeds(seeds: &[SeedResult]) -> Self {
        let r = |f: fn(&MetricsReport) -> Option<f64>| Stat::of(seeds.iter().map(|s| f(&s.report)));
        let relapse_max = |s: &SeedResult| s.report.relapse.iter().map(|e| e.value).reduce(f64::max);
        let ut = |s: &SeedResult| {
            let n = s.unlearn_times.len();
            (n > 0).then(|| s.unlearn_times.iter().map(|t| t.seconds).sum::<f64>() / n as f64)
        };
        Self {
            ra: r(|m| m.ra),
            fa: r(|m| m.fa),
            spill_mean: r(|m| m.spill_mean),
            relapse_mean: r(|m| m.relapse_mean),
            relapse_max: Stat::of(seeds.iter().map(relapse_max)),
            mia: r(|m| m.mia),
            unlearn_seconds: Stat::of(seeds.iter().map(ut)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub sequence: String,
    pub seeds: Vec<SeedResult>,
    pub aggregate: Aggregate,
}

/// Accuracy of the network generated for `task`. Tasks that have never been
/// learned have no embedding and are measured through a seeded probe embedding.
fn measure(state: &HypernetState, task: TaskId, data: &TaskDataset, seed: u64) -> Result<f64> {
    let theta = match state.task_embeddings.get(&task) {
        Some(e) => state.generate(e)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 4, task as u64));
            state.generate_vec(&random_embedding(&mut rng, state.config().task_emb_dim))?
        }
    };
    mainnet::evaluate_flat(state.arch(), &theta.flat, &data.test)
}

fn run_seed(
    cfg: &RunConfig,
    arch: &MainArch,
    requests: &[Request],
    datasets: &BTreeMap<TaskId, TaskDataset>,
    seed: u64,
) -> Result<SeedResult> {
    let mut state = init_hypernet(arch.clone(), cfg.hypernet.clone(), mix(seed, 0, 0))?;
    let mut noise = NoiseSource::new(mix(seed, 3, 0), state.param_count());
    let mut trace = AccuracyTrace::new(datasets.keys().copied());
    let mut burn_in = cfg.unlearn.burn_in;
    let mut phi_norms = Vec::with_capacity(requests.len());
    let mut unlearn_times = Vec::new();

    for (i, r) in requests.iter().enumerate() {
        let wrap = |e: Error| Error::Operation {
            index: i,
            op: r.to_string(),
            source: Box::new(e),
        };
        match r.instruction {
            Instruction::Learn => {
                let lc = LearnConfig {
                    seed: mix(seed, 1, i as u64),
                    ..cfg.learn.clone()
                };
                engine::learn_task(&mut state, r.task_id, &datasets[&r.task_id], &lc).map_err(wrap)?;
            }
            Instruction::Unlearn => {
                let uc = UnlearnConfig {
                    burn_in,
                    seed: mix(seed, 2, i as u64),
                    ..cfg.unlearn.clone()
                };
                let start = Instant::now();
                let stats = engine::unlearn_task(&mut state, r.task_id, &uc, &mut noise).map_err(wrap)?;
                unlearn_times.push(UnlearnTiming {
                    op_index: i,
                    task_id: r.task_id,
                    burn_in: stats.iterations,
                    seconds: start.elapsed().as_secs_f64(),
                });
                if cfg.unlearn.anneal && burn_in > cfg.unlearn.anneal_floor {
                    burn_in = engine::anneal_burn_in(burn_in, cfg.unlearn.anneal_rate, cfg.unlearn.anneal_floor);
                }
            }
        }
        let column = datasets
            .iter()
            .map(|(t, d)| Ok((*t, measure(&state, *t, d, seed)?)))
            .collect::<Result<BTreeMap<_, _>>>()
            .map_err(wrap)?;
        trace.push(r.instruction, r.task_id, &column)?;
        phi_norms.push(state.phi_norm());
    }

    let mia = if cfg.mia {
        let forgotten: Vec<TaskId> = trace
            .final_status()
            .into_iter()
            .filter(|(_, s)| *s == FinalStatus::Forgotten)
            .map(|(t, _)| t)
            .collect();
        let scores = forgotten
            .iter()
            .map(|t| {
                let theta = state.generate_task(*t)?;
                let d = &datasets[t];
                let members = mainnet::per_sample_losses_flat(arch, &theta.flat, &d.train)?;
                let others = mainnet::per_sample_losses_flat(arch, &theta.flat, &d.test)?;
                crate::metrics::mia_score(&members, &others)
            })
            .collect::<Result<Vec<f64>>>()?;
        (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
    } else {
        None
    };

    let report = MetricsReport::from_trace(&trace, mia)?;
    Ok(SeedResult {
        seed,
        trace,
        report,
        phi_norms,
        unlearn_times,
    })
}

fn run_requests(cfg: &RunConfig, requests: &[Request]) -> Result<RunResult> {
    cfg.validate()?;
    let arch = cfg.arch()?;
    let datasets = cfg.dataset.build(&sequence_tasks(requests))?;
    let seeds = cfg
        .seeds
        .par_iter()
        .map(|&s| run_seed(cfg, &arch, requests, &datasets, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunResult {
        sequence: format_sequence(requests),
        aggregate: Aggregate::from_seeds(&seeds),
        seeds,
    })
}

/// Runs the configured sequence once per seed, seeds in parallel.
pub fn run_sequence(cfg: &RunConfig) -> Result<RunResult> {
    run_requests(cfg, &cfg.requests()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub with_unlearning: RunResult,
    pub only_learning: RunResult,
    /// Tasks retained at the end of the unlearning run.
    pub retained: Vec<TaskId>,
    /// RA over `retained`, per seed, for each run.
    pub ra_with_unlearning: Vec<f64>,
    pub ra_only_learning: Vec<f64>,
}

fn ra_over(trace: &AccuracyTrace, tasks: &[TaskId]) -> Result<f64> {
    let last = trace.len() - 1;
    let sum = tasks.iter().map(|t| trace.accuracy(*t, last)).sum::<Result<f64>>()?;
    Ok(sum / tasks.len() as f64)
}

/// Runs the sequence and its unlearning-free counterpart on the same seeds.
pub fn compare_only_learning(cfg: &RunConfig) -> Result<Comparison> {
    let requests = cfg.requests()?;
    if !requests.iter().any(|r| r.instruction == Instruction::Unlearn) {
        return Err(Error::Sequence("comparison needs at least one unlearning request".into()));
    }
    let with_unlearning = run_requests(cfg, &requests)?;
    let only_learning = run_requests(cfg, &strip_unlearning(&requests))?;
    let retained: Vec<TaskId> = with_unlearning.seeds[0]
        .trace
        .final_status()
        .into_iter()
        .filter(|(_, s)| *s == FinalStatus::Retained)
        .map(|(t, _)| t)
        .collect();
    if retained.is_empty() {
        return Err(Error::Sequence("no task is retained at the end of the sequence".into()));
    }
    let ra = |r: &RunResult| r.seeds.iter().map(|s| ra_over(&s.trace, &retained)).collect::<Result<Vec<_>>>();
    Ok(Comparison {
        ra_with_unlearning: ra(&with_unlearning)?,
        ra_only_learning: ra(&only_learning)?,
        retained,
        with_unlearning,
        only_learning,
    })
}

pub fn trace_file(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("trace_seed{seed}.csv"))
}

pub fn report_file(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("report_seed{seed}.json"))
}

#[derive(Serialize)]
struct PlotRow {
    op_index: usize,
    op: String,
    task: TaskId,
    mean_accuracy: f64,
    std_accuracy: f64,
}

/// Writes per-seed traces and reports, `result.json`, `plot.csv` (seed-averaged
/// accuracy of every task after every operation) and `config.json`.
pub fn emit_results(result: &RunResult, cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in &result.seeds {
        s.trace.write_csv(BufWriter::new(File::create(trace_file(dir, s.seed))?))?;
        fs::write(report_file(dir, s.seed), s.report.to_json()?)?;
    }
    fs::write(dir.join("result.json"), serde_json::to_string_pretty(result)?)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;

    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("plot.csv"))?));
    if let Some(first) = result.seeds.first() {
        for op in &first.trace.ops {
            for task in first.trace.tasks() {
                let values = result
                    .seeds
                    .iter()
                    .map(|s| s.trace.accuracy(task, op.op_index).map(Some))
                    .collect::<Result<Vec<_>>>()?;
                let stat = Stat::of(values).expect("at least one seed");
                w.serialize(PlotRow {
                    op_index: op.op_index,
                    op: format!("{}{}", op.instruction, op.task_id),
                    task,
                    mean_accuracy: stat.mean,
                    std_accuracy: stat.std,
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Gradient, noise-limit and chunk round-trip self-checks used by `verify`.
pub fn verify_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    use rand::Rng;
    use rand_distr::StandardNormal;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let arch = MainArch::new(vec![3, 4, 2])?;
    let hcfg = HypernetConfig {
        hidden: vec![5],
        task_emb_dim: 3,
        chunk_emb_dim: 2,
        num_chunks: 4,
    };
    let mut worst = 0.0_f64;
    let mut max_params = 0;
    for i in 0..100 {
        let mut state = init_hypernet(arch.clone(), hcfg.clone(), mix(seed, 10, i))?;
        let anchor = random_embedding(&mut rng, 3);
        state.task_embeddings.insert(
            0,
            crate::hypernet::TaskEmbedding {
                id: 0,
                vec: anchor,
                trainable: false,
                status: crate::hypernet::TaskStatus::Active,
            },
        );
        state.reg_set.insert(0);
        state.snapshot();
        for w in state.phi_mut() {
            *w += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
        let e_t = random_embedding(&mut rng, 3);
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<usize> = (0..4).map(|_| rng.random_range(0..2)).collect();
        let anchors: BTreeSet<TaskId> = [0].into();
        let n_phi = state.phi().len();
        let params: Vec<f64> = state.phi().iter().chain(&e_t).copied().collect();
        max_params = max_params.max(params.len());
        let err = crate::nn::grad_check(
            |p| {
                let mut s = state.clone();
                s.phi_mut().copy_from_slice(&p[..n_phi]);
                let (l, gp, ge) = engine::learning_loss_and_grad(&s, &p[n_phi..], &anchors, &x, &y, 0.5)
                    .expect("valid instance");
                (l, [gp, ge].concat())
            },
            &params,
            1e-6,
        );
        worst = worst.max(err);
    }
    out.push(CheckOutcome {
        name: "composite gradient",
        passed: worst < 1e-5 && max_params <= 200,
        detail: format!("max relative error {worst:.2e} over 100 instances of {max_params} parameters"),
    });

    let d = 100;
    let theta = vec![0.5_f64.sqrt(); d];
    let estimate = crate::metrics::mse_limit_check(&theta, 100_000, seed)?;
    out.push(CheckOutcome {
        name: "noise limit",
        passed: (estimate - 150.0).abs() < 1.5,
        detail: format!("estimate {estimate:.3}, limit 150"),
    });

    let big = MainArch::new(vec![784, 100, 10])?;
    let flat = crate::hypernet::GeneratedParams {
        flat: (0..big.param_count()).map(|_| rng.sample(StandardNormal)).collect(),
    };
    let back = mainnet::assemble(&flat, &big)?.flatten();
    out.push(CheckOutcome {
        name: "chunk round-trip",
        passed: back == flat,
        detail: format!("{} parameters", flat.d()),
    });
    Ok(out)
}
