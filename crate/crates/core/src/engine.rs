//! Sequential-task training with experience replay.
//!
//! A run trains one network on each task in turn. While a task trains,
//! minibatches from the task strictly alternate with minibatches drawn (with
//! replacement) from the replay buffer. After every epoch the whole task is
//! re-evaluated to feed the learning-speed trackers. When a task finishes its
//! examples are offered to the buffer through the configured sampler.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{self, batch_of, ClassOrder, DataError, Example, ExampleId, ShapesConfig, Task, TaskSequence};
use crate::samplers::{self, SamplerConfig, SamplerError, SelectionInput};
use crate::seeds;
use crate::speed::{ClassificationMatrix, EvalSplit, SpeedReport, SpeedTracker, TrackerMode, TrackingError};
use crate::tensor::{cosine_lr, sgd_step, Hyper, InputDims, Matrix, NetSpec, Network, OptState, TensorError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tracking(#[from] TrackingError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EngineError>;

/// Where in a run a failure happened.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "stage", content = "task")]
pub enum Stage {
    Config,
    Data,
    Train(usize),
    Refresh(usize),
    Evaluate,
    Write,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Config => f.write_str("config"),
            Stage::Data => f.write_str("data"),
            Stage::Train(t) => write!(f, "train(task {t})"),
            Stage::Refresh(t) => write!(f, "refresh(task {t})"),
            Stage::Evaluate => f.write_str("evaluate"),
            Stage::Write => f.write_str("write"),
        }
    }
}

#[derive(Debug, Error)]
#[error("run failed at stage {stage}: {error}")]
pub struct RunFailure {
    pub stage: Stage,
    #[source]
    pub error: EngineError,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, RunFailure>;
}

impl<T, E: Into<EngineError>> AtStage<T> for std::result::Result<T, E> {
    fn at(self, stage: Stage) -> std::result::Result<T, RunFailure> {
        self.map_err(|e| RunFailure { stage, error: e.into() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub example: Example,
    pub task: usize,
}

/// Fixed-capacity store of examples from completed tasks.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: Vec<BufferEntry>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity, entries: Vec::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn per_task_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.task).or_default() += 1;
        }
        counts
    }

    pub fn ids(&self) -> BTreeSet<ExampleId> {
        self.entries.iter().map(|e| e.example.id).collect()
    }

    pub fn ids_of_task(&self, task: usize) -> BTreeSet<ExampleId> {
        self.entries.iter().filter(|e| e.task == task).map(|e| e.example.id).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EvalMode {
    /// Task identity known: argmax over the example's own task classes.
    #[default]
    Til,
    /// Argmax over every class seen so far.
    Cil,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Shapes(ShapesConfig),
    Csv { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    pub num_tasks: usize,
    pub class_order: ClassOrder,
    pub hidden_widths: Vec<usize>,
    pub hyper: Hyper,
    pub buffer_capacity: usize,
    pub sampler: SamplerConfig,
    pub eval_mode: EvalMode,
    pub tracker_mode: TrackerMode,
    pub seed: u64,
    #[serde(skip)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// The reference toy benchmark: 8 classes of 8x8 shapes (200 train and
    /// 100 test per class) split into 2 tasks, a 64-64 MLP, 30 epochs per
    /// task, batch 32, base learning rate 0.05, no buffer.
    pub fn reference() -> Self {
        RunConfig {
            data: DataSource::Shapes(ShapesConfig::default()),
            num_tasks: 2,
            class_order: ClassOrder::Given,
            hidden_widths: vec![64, 64],
            hyper: Hyper::default(),
            buffer_capacity: 0,
            sampler: SamplerConfig::uniform(),
            eval_mode: EvalMode::Til,
            tracker_mode: TrackerMode::RunningMean,
            seed: 0,
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(EngineError::Config("num_tasks must be at least 1".into()));
        }
        if self.hidden_widths.contains(&0) {
            return Err(EngineError::Config("hidden widths must be positive".into()));
        }
        self.hyper.validate()?;
        self.sampler.validate()?;
        Ok(())
    }

    pub fn build_tasks(&self) -> Result<TaskSequence> {
        let split = match &self.data {
            DataSource::Shapes(cfg) => data::generate_shapes(cfg)?,
            DataSource::Csv { train, test } => {
                data::SplitDataset::new(data::load_csv_dataset(train)?, data::load_csv_dataset(test)?)?
            }
        };
        Ok(data::split_into_tasks(&split, self.num_tasks, self.class_order)?)
    }

    pub fn net_spec(&self, shape: InputDims, num_classes: usize) -> NetSpec {
        NetSpec::new(shape, self.hidden_widths.clone(), num_classes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub task: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Test accuracy of every task seen so far; `None` for future tasks.
    pub accuracies: Vec<Option<f64>>,
}

/// Pre-stacked examples of one split of one task.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub ids: Vec<ExampleId>,
    pub batch: Matrix,
    pub labels: Vec<usize>,
}

impl EvalSet {
    pub fn new(examples: &[Example], width: usize) -> Self {
        let (batch, labels) = batch_of(examples, width);
        EvalSet { ids: examples.iter().map(|e| e.id).collect(), batch, labels }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Predicted class for every row of `logits`. TIL restricts the argmax to the
/// class set of the example's own task, CIL to the union of `class_sets`.
/// Ties go to the lowest class id.
pub fn predict(logits: &Matrix, labels: &[usize], mode: EvalMode, class_sets: &[Vec<usize>]) -> Result<Vec<usize>> {
    let mut owner = BTreeMap::new();
    for (t, set) in class_sets.iter().enumerate() {
        for &c in set {
            owner.insert(c, t);
        }
    }
    let mut seen: Vec<usize> = owner.keys().copied().collect();
    seen.sort_unstable();
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let task = *owner
                .get(&y)
                .ok_or_else(|| EngineError::Evaluation(format!("label {y} belongs to no known class set")))?;
            let candidates = match mode {
                EvalMode::Til => &class_sets[task],
                EvalMode::Cil => &seen,
            };
            let row = logits.row(i);
            let mut best = candidates[0];
            for &c in candidates {
                if row[c] > row[best] || (row[c] == row[best] && c < best) {
                    best = c;
                }
            }
            Ok(best)
        })
        .collect()
}

pub fn correctness(net: &Network, set: &EvalSet, mode: EvalMode, class_sets: &[Vec<usize>]) -> Result<Vec<bool>> {
    if set.is_empty() {
        return Ok(Vec::new());
    }
    let logits = net.forward(&set.batch)?;
    let preds = predict(&logits, &set.labels, mode, class_sets)?;
    Ok(preds.iter().zip(&set.labels).map(|(p, y)| p == y).collect())
}

fn accuracy(correct: &[bool]) -> f64 {
    if correct.is_empty() {
        return 0.0;
    }
    correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64
}

/// Accuracy on `examples`, grouped by the task owning each label.
pub fn evaluate(
    net: &Network,
    examples: &[Example],
    mode: EvalMode,
    task_class_sets: &[Vec<usize>],
) -> Result<BTreeMap<usize, f64>> {
    let set = EvalSet::new(examples, net.spec().input_dims.flat());
    let correct = correctness(net, &set, mode, task_class_sets)?;
    let mut tally: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (ex, ok) in examples.iter().zip(correct) {
        let task = task_class_sets
            .iter()
            .position(|s| s.contains(&ex.label))
            .expect("predict validated every label");
        let t = tally.entry(task).or_default();
        t.0 += usize::from(ok);
        t.1 += 1;
    }
    Ok(tally.into_iter().map(|(t, (c, n))| (t, c as f64 / n as f64)).collect())
}

/// Trackers of one task, over its train and test examples.
pub struct TaskTrackers {
    pub train: SpeedTracker,
    pub test: SpeedTracker,
}

impl TaskTrackers {
    pub fn new(mode: TrackerMode, epochs: usize, task: &Task) -> Result<Self> {
        let train_ids: Vec<ExampleId> = task.train.iter().map(|e| e.id).collect();
        let test_ids: Vec<ExampleId> = task.test.iter().map(|e| e.id).collect();
        Ok(TaskTrackers {
            train: SpeedTracker::new(mode, epochs, &train_ids)?,
            test: SpeedTracker::new(mode, epochs, &test_ids)?,
        })
    }
}

/// Evaluation context shared by all tasks of a run.
pub struct EvalContext<'a> {
    pub mode: EvalMode,
    pub class_sets: &'a [Vec<usize>],
    pub train_sets: &'a [EvalSet],
    pub test_sets: &'a [EvalSet],
}

/// Train on one task for `hyper.epochs` epochs, alternating task and buffer
/// batches, and record end-of-epoch correctness into `trackers`.
#[allow(clippy::too_many_arguments)]
pub fn train_task(
    net: &mut Network,
    opt: &mut OptState,
    task: &Task,
    buffer: &ReplayBuffer,
    trackers: &mut TaskTrackers,
    ctx: &EvalContext<'_>,
    seed: u64,
) -> Result<Vec<EpochMetrics>> {
    let hyper = opt.hyper;
    let t = task.index;
    let width = net.spec().input_dims.flat();
    if let Some(e) = buffer.entries().iter().find(|e| e.task >= t) {
        return Err(EngineError::Config(format!(
            "buffer holds example {} from task {} while training task {t}",
            e.example.id, e.task
        )));
    }
    let seen = &ctx.class_sets[..=t];
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let mut metrics = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        opt.begin_epoch(epoch);
        let lr = cosine_lr(hyper.base_lr, epoch, hyper.epochs)?;
        let mut rng = seeds::rng(seeds::derive_indexed(seed, "epoch", epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(hyper.batch_size) {
            let (batch, labels) = batch_of(chunk.iter().map(|&i| &task.train[i]), width);
            loss_sum += sgd_step(net, opt, &batch, &labels, lr)?;
            steps += 1;
            if !buffer.is_empty() {
                let entries = buffer.entries();
                let draws = (0..hyper.batch_size).map(|_| &entries[rng.random_range(0..entries.len())].example);
                let (batch, labels) = batch_of(draws, width);
                loss_sum += sgd_step(net, opt, &batch, &labels, lr)?;
                steps += 1;
            }
        }

        let train_ok = correctness(net, &ctx.train_sets[t], ctx.mode, seen)?;
        trackers.train.record_epoch(epoch, ctx.train_sets[t].ids.iter().copied().zip(train_ok))?;
        let test_ok = correctness(net, &ctx.test_sets[t], ctx.mode, seen)?;
        trackers.test.record_epoch(epoch, ctx.test_sets[t].ids.iter().copied().zip(test_ok.iter().copied()))?;

        let mut accuracies = vec![None; ctx.class_sets.len()];
        for (j, acc) in accuracies.iter_mut().enumerate().take(t + 1) {
            *acc = Some(if j == t {
                accuracy(&test_ok)
            } else {
                accuracy(&correctness(net, &ctx.test_sets[j], ctx.mode, seen)?)
            });
        }
        metrics.push(EpochMetrics {
            task: t,
            epoch,
            lr,
            train_loss: if steps > 0 { loss_sum / steps as f64 } else { 0.0 },
            accuracies,
        });
    }
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshOutcome {
    pub evicted: usize,
    pub added: usize,
    /// The sampler had fewer candidates than free slots.
    pub shortfall: bool,
}

/// Rebalance the buffer after task `task.index` finished: each seen task gets
/// a quota of `floor(capacity / tasks_seen)`, incumbents above quota are
/// evicted uniformly at random, and the free slots are filled from the
/// finished task through the configured sampler.
pub fn refresh_buffer(
    buffer: &mut ReplayBuffer,
    task: &Task,
    speeds: Option<&SpeedReport>,
    net: &Network,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<RefreshOutcome> {
    let capacity = buffer.capacity;
    if capacity == 0 {
        return Ok(RefreshOutcome { evicted: 0, added: 0, shortfall: false });
    }
    let tasks_seen = task.index + 1;
    let quota = capacity / tasks_seen;

    let mut evicted = 0;
    let mut kept: Vec<BufferEntry> = Vec::with_capacity(capacity);
    let mut by_task: BTreeMap<usize, Vec<BufferEntry>> = BTreeMap::new();
    for e in buffer.entries.drain(..) {
        by_task.entry(e.task).or_default().push(e);
    }
    for (t, mut entries) in by_task {
        if entries.len() > quota {
            let mut rng = seeds::rng(seeds::derive_indexed(seed, "evict", t as u64));
            let mut survivors: Vec<usize> = rand::seq::index::sample(&mut rng, entries.len(), quota).into_vec();
            survivors.sort_unstable();
            evicted += entries.len() - quota;
            let mut slots: Vec<Option<BufferEntry>> = entries.drain(..).map(Some).collect();
            entries = survivors.into_iter().map(|i| slots[i].take().expect("distinct index")).collect();
        }
        kept.extend(entries);
    }

    let free = capacity - kept.len();
    let input = SelectionInput { pool: &task.train, classes: &task.classes, speeds, net };
    let selection = samplers::select(sampler, &input, free, seeds::derive(seed, "sample"))?;
    let chosen: BTreeSet<ExampleId> = selection.ids.iter().copied().collect();
    let added = chosen.len();
    kept.extend(
        task.train
            .iter()
            .filter(|e| chosen.contains(&e.id))
            .map(|e| BufferEntry { example: e.clone(), task: task.index }),
    );
    kept.sort_by_key(|e| (e.task, e.example.id));
    buffer.entries = kept;
    Ok(RefreshOutcome { evicted, added, shortfall: selection.shortfall })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpeeds {
    pub train: SpeedReport,
    pub test: SpeedReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRemembered {
    pub train: BTreeSet<ExampleId>,
    pub test: BTreeSet<ExampleId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMatrices {
    pub train: ClassificationMatrix,
    pub test: ClassificationMatrix,
}

/// Per-run analysis data persisted next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tracking {
    pub epochs: usize,
    pub buffer_capacity: usize,
    pub speeds: Vec<TaskSpeeds>,
    pub remembered: Vec<TaskRemembered>,
    /// Only present for full-matrix tracking.
    pub matrices: Option<Vec<TaskMatrices>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub seed: u64,
    pub git_or_build_id: String,
    pub per_epoch_metrics_path: String,
    pub final_accuracies: Vec<f64>,
    pub mean_final_accuracy: f64,
    pub final_accuracies_til: Vec<f64>,
    pub final_accuracies_cil: Vec<f64>,
    pub remembered_counts: Vec<usize>,
    pub file_digests: BTreeMap<String, String>,
    pub failure: Option<Failure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub metrics: Vec<EpochMetrics>,
    /// Final test accuracy per task under the configured mode.
    pub final_accuracies: Vec<f64>,
    pub mean_final_accuracy: f64,
    pub final_til: Vec<f64>,
    pub final_cil: Vec<f64>,
    /// Test accuracy of every task right after its own training finished.
    pub accuracy_at_own_end: Vec<f64>,
    pub tracking: Tracking,
    pub refreshes: Vec<RefreshOutcome>,
    pub buffer: ReplayBuffer,
    pub manifest: RunManifest,
}

impl RunResult {
    pub fn mean_til(&self) -> f64 {
        mean(&self.final_til)
    }

    pub fn mean_cil(&self) -> f64 {
        mean(&self.final_cil)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const TRACKING_FILE: &str = "tracking.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Build id recorded in manifests.
pub fn build_id() -> String {
    format!("{}-{}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn metrics_csv(metrics: &[EpochMetrics], num_tasks: usize) -> String {
    let mut out = String::from("task,epoch,lr,train_loss");
    for t in 0..num_tasks {
        let _ = write!(out, ",acc_task_{t}");
    }
    out.push('\n');
    for m in metrics {
        let _ = write!(out, "{},{},{},{}", m.task, m.epoch, m.lr, m.train_loss);
        for a in &m.accuracies {
            match a {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<String> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|source| EngineError::Io { path: path.display().to_string(), source })?;
    Ok(sha256_hex(bytes))
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    write_file(dir, MANIFEST_FILE, json.as_bytes()).map(|_| ())
}

fn empty_manifest(cfg: &RunConfig) -> RunManifest {
    RunManifest {
        config: cfg.clone(),
        seed: cfg.seed,
        git_or_build_id: build_id(),
        per_epoch_metrics_path: METRICS_FILE.into(),
        final_accuracies: Vec::new(),
        mean_final_accuracy: 0.0,
        final_accuracies_til: Vec::new(),
        final_accuracies_cil: Vec::new(),
        remembered_counts: Vec::new(),
        file_digests: BTreeMap::new(),
        failure: None,
    }
}

/// Build the task sequence and run it. On failure, a manifest recording the
/// failing stage is written when an output directory is configured.
pub fn run_experiment(cfg: &RunConfig) -> std::result::Result<RunResult, RunFailure> {
    let outcome = cfg
        .validate()
        .at(Stage::Config)
        .and_then(|_| cfg.build_tasks().at(Stage::Data))
        .and_then(|tasks| run_on_tasks(cfg, &tasks));
    if let (Err(failure), Some(dir)) = (&outcome, &cfg.output_dir) {
        if failure.stage != Stage::Write {
            let mut manifest = empty_manifest(cfg);
            manifest.failure = Some(Failure { stage: failure.stage.clone(), message: failure.error.to_string() });
            let _ = std::fs::create_dir_all(dir);
            let _ = write_manifest(dir, &manifest);
        }
    }
    outcome
}

/// Run a prepared task sequence.
pub fn run_on_tasks(cfg: &RunConfig, tasks: &TaskSequence) -> std::result::Result<RunResult, RunFailure> {
    cfg.validate().at(Stage::Config)?;
    let spec = cfg.net_spec(tasks.shape(), tasks.num_classes());
    let mut net = Network::init(spec, seeds::derive(cfg.seed, "network")).at(Stage::Config)?;
    let mut opt = OptState::new(&net, cfg.hyper).at(Stage::Config)?;
    let width = tasks.shape().flat();
    let class_sets = tasks.class_sets();
    let train_sets: Vec<EvalSet> = tasks.tasks().iter().map(|t| EvalSet::new(&t.train, width)).collect();
    let test_sets: Vec<EvalSet> = tasks.tasks().iter().map(|t| EvalSet::new(&t.test, width)).collect();
    let ctx = EvalContext { mode: cfg.eval_mode, class_sets: &class_sets, train_sets: &train_sets, test_sets: &test_sets };

    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut metrics = Vec::new();
    let mut speeds = Vec::new();
    let mut matrices = Vec::new();
    let mut refreshes = Vec::new();
    let mut own_end: Vec<(BTreeSet<ExampleId>, BTreeSet<ExampleId>)> = Vec::new();
    let mut accuracy_at_own_end = Vec::new();
    let last = tasks.len() - 1;

    for task in tasks.tasks() {
        let t = task.index;
        let stage = Stage::Train(t);
        let mut trackers = TaskTrackers::new(cfg.tracker_mode, cfg.hyper.epochs, task).at(stage.clone())?;
        let task_seed = seeds::derive_indexed(cfg.seed, "task", t as u64);
        let m = train_task(&mut net, &mut opt, task, &buffer, &mut trackers, &ctx, task_seed).at(stage.clone())?;
        accuracy_at_own_end.push(m.last().and_then(|e| e.accuracies[t]).unwrap_or(0.0));
        metrics.extend(m);

        let report = TaskSpeeds {
            train: trackers.train.learning_speeds(t, EvalSplit::Train).at(stage.clone())?,
            test: trackers.test.learning_speeds(t, EvalSplit::Test).at(stage.clone())?,
        };
        if cfg.tracker_mode == TrackerMode::FullMatrix {
            matrices.push(TaskMatrices {
                train: trackers.train.matrix().at(stage.clone())?,
                test: trackers.test.matrix().at(stage.clone())?,
            });
        }
        let seen = &class_sets[..=t];
        let correct_ids = |set: &EvalSet| -> Result<BTreeSet<ExampleId>> {
            let ok = correctness(&net, set, cfg.eval_mode, seen)?;
            Ok(set.ids.iter().zip(ok).filter(|(_, c)| *c).map(|(id, _)| *id).collect())
        };
        own_end.push((correct_ids(&train_sets[t]).at(stage.clone())?, correct_ids(&test_sets[t]).at(stage)?));

        if t != last {
            let refresh_seed = seeds::derive_indexed(cfg.seed, "refresh", t as u64);
            let outcome = refresh_buffer(&mut buffer, task, Some(&report.train), &net, &cfg.sampler, refresh_seed)
                .at(Stage::Refresh(t))?;
            if outcome.shortfall {
                log::warn!("task {t}: sampler returned {} examples for a larger budget", outcome.added);
            }
            refreshes.push(outcome);
        }
        speeds.push(report);
    }

    let stage = Stage::Evaluate;
    let mut final_til = Vec::with_capacity(tasks.len());
    let mut final_cil = Vec::with_capacity(tasks.len());
    let mut remembered = Vec::with_capacity(tasks.len());
    for t in 0..tasks.len() {
        let til_test = correctness(&net, &test_sets[t], EvalMode::Til, &class_sets).at(stage.clone())?;
        let cil_test = correctness(&net, &test_sets[t], EvalMode::Cil, &class_sets).at(stage.clone())?;
        final_til.push(accuracy(&til_test));
        final_cil.push(accuracy(&cil_test));
        let (own_train, own_test) = &own_end[t];
        let end_train = correctness(&net, &train_sets[t], cfg.eval_mode, &class_sets).at(stage.clone())?;
        let end_test = if cfg.eval_mode == EvalMode::Til { til_test } else { cil_test };
        let to_set = |set: &EvalSet, ok: Vec<bool>| -> BTreeSet<ExampleId> {
            set.ids.iter().zip(ok).filter(|(_, c)| *c).map(|(id, _)| *id).collect()
        };
        remembered.push(TaskRemembered {
            train: crate::speed::remembered_set(own_train, &to_set(&train_sets[t], end_train)),
            test: crate::speed::remembered_set(own_test, &to_set(&test_sets[t], end_test)),
        });
    }
    let final_accuracies = match cfg.eval_mode {
        EvalMode::Til => final_til.clone(),
        EvalMode::Cil => final_cil.clone(),
    };
    let tracking = Tracking {
        epochs: cfg.hyper.epochs,
        buffer_capacity: cfg.buffer_capacity,
        speeds,
        remembered,
        matrices: (cfg.tracker_mode == TrackerMode::FullMatrix).then_some(matrices),
    };

    let mut manifest = empty_manifest(cfg);
    manifest.mean_final_accuracy = mean(&final_accuracies);
    manifest.final_accuracies = final_accuracies.clone();
    manifest.final_accuracies_til = final_til.clone();
    manifest.final_accuracies_cil = final_cil.clone();
    manifest.remembered_counts = tracking.remembered.iter().map(|r| r.test.len()).collect();

    if let Some(dir) = &cfg.output_dir {
        let stage = Stage::Write;
        std::fs::create_dir_all(dir)
            .map_err(|source| EngineError::Io { path: dir.display().to_string(), source })
            .at(stage.clone())?;
        let csv = metrics_csv(&metrics, tasks.len());
        let d = write_file(dir, METRICS_FILE, csv.as_bytes()).at(stage.clone())?;
        manifest.file_digests.insert(METRICS_FILE.into(), d);
        let json = serde_json::to_string(&tracking).expect("tracking serializes");
        let d = write_file(dir, TRACKING_FILE, json.as_bytes()).at(stage.clone())?;
        manifest.file_digests.insert(TRACKING_FILE.into(), d);
        write_manifest(dir, &manifest).at(stage)?;
    }

    Ok(RunResult {
        metrics,
        mean_final_accuracy: manifest.mean_final_accuracy,
        final_accuracies,
        final_til,
        final_cil,
        accuracy_at_own_end,
        tracking,
        refreshes,
        buffer,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle_logits(labels: &[usize], classes: usize) -> Matrix {
        let mut m = Matrix::zeros(labels.len(), classes);
        for (i, &y) in labels.iter().enumerate() {
            m.set(i, y, 10.0);
        }
        m
    }

    #[test]
    fn oracle_logits_score_perfectly() {
        let sets = vec![vec![0, 1], vec![2, 3]];
        let labels = vec![0, 1, 2, 3, 3, 0];
        let logits = oracle_logits(&labels, 4);
        for mode in [EvalMode::Til, EvalMode::Cil] {
            assert_eq!(predict(&logits, &labels, mode, &sets).unwrap(), labels);
        }
    }

    #[test]
    fn zero_logits_tie_to_lowest_class() {
        let sets = vec![vec![0, 1], vec![2, 3]];
        let labels = vec![0, 1, 1, 2, 3, 3, 3];
        let logits = Matrix::zeros(labels.len(), 4);
        let til = predict(&logits, &labels, EvalMode::Til, &sets).unwrap();
        assert_eq!(til, vec![0, 0, 0, 2, 2, 2, 2]);
        let cil = predict(&logits, &labels, EvalMode::Cil, &sets).unwrap();
        assert!(cil.iter().all(|&p| p == 0));
    }

    #[test]
    fn unknown_label_is_an_error() {
        let logits = Matrix::zeros(1, 4);
        assert!(matches!(predict(&logits, &[3], EvalMode::Til, &[vec![0, 1]]), Err(EngineError::Evaluation(_))));
    }

    #[test]
    fn metrics_csv_layout() {
        let m = vec![EpochMetrics { task: 0, epoch: 0, lr: 0.1, train_loss: 1.5, accuracies: vec![Some(0.5), None] }];
        assert_eq!(metrics_csv(&m, 2), "task,epoch,lr,train_loss,acc_task_0,acc_task_1\n0,0,0.1,1.5,0.5,\n");
    }
}
