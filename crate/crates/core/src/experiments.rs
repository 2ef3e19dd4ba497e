//! Experiment configurations, multi-run execution, baselines and result files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    make_task_stream, random_label_order, sequential_label_order, AccumulativeValidation, DatasetPair, TaskSpec,
    NUM_CLASSES,
};
use crate::error::{Error, Result};
use crate::gcsl::{EigenSelection, GcslModel};
use crate::linalg::{Matrix, Rng};
use crate::nn::{Loss, Network, Optimizer, OptimizerSpec};

pub const DEFAULT_BATCH_SIZE: usize = 128;
pub const LABELS_PER_TASK: usize = 2;

/// Rows per forward pass when scoring a validation set.
const EVAL_CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Fmnist,
}

impl DatasetKind {
    /// Conventional sub-directory of the data root.
    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Fmnist => "fashion-mnist",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Gcsl,
    /// Sequential fine-tuning of every parameter with masked BCE.
    Naive,
    /// One task over all labels with softmax cross-entropy.
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelOrder {
    /// Pairs (0,1), (2,3), ... (8,9).
    Sequential,
    /// A fresh permutation per run.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Display name; derived from the other fields when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub dataset: DatasetKind,
    pub hidden_layers: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_sizes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_ratio: Option<f64>,
    pub epochs_per_task: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    pub runs: usize,
    pub seed: u64,
    pub label_order: LabelOrder,
    pub mode: Mode,
    #[serde(default)]
    pub eigen_selection: EigenSelection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_limit: Option<usize>,
    #[serde(default)]
    pub bias: bool,
}

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Json {
            context: "experiment config".into(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.hidden_layers.is_empty() {
            return fail("hidden_layers must list at least one width".into());
        }
        if self.hidden_layers.contains(&0) {
            return fail(format!(
                "hidden layer widths must be positive: {:?}",
                self.hidden_layers
            ));
        }
        if self.runs == 0 {
            return fail("runs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.sample_limit == Some(0) {
            return fail("sample_limit must be at least 1".into());
        }
        self.optimizer.validate()?;
        if let Some(r) = self.v_ratio {
            if !(0.0..=1.0).contains(&r) {
                return fail(format!("v_ratio must lie in [0, 1], got {r}"));
            }
        }
        match (&self.v_sizes, self.v_ratio) {
            (Some(_), Some(_)) => return fail("give either v_sizes or v_ratio, not both".into()),
            (None, None) if self.mode == Mode::Gcsl => {
                return fail("gcsl mode needs v_sizes or v_ratio".into());
            }
            _ => {}
        }
        if let Some(sizes) = &self.v_sizes {
            if sizes.len() != self.hidden_layers.len() {
                return fail(format!(
                    "v_sizes {sizes:?} does not match hidden_layers {:?}",
                    self.hidden_layers
                ));
            }
            for (&n, &w) in sizes.iter().zip(&self.hidden_layers) {
                if n > w {
                    return fail(format!("subspace size {n} exceeds layer width {w}"));
                }
            }
        }
        Ok(())
    }

    /// Per-layer subspace sizes; ratios round down.
    pub fn subspace_sizes(&self) -> Vec<usize> {
        match (&self.v_sizes, self.v_ratio) {
            (Some(s), _) => s.clone(),
            (None, Some(r)) => self.hidden_layers.iter().map(|&w| ratio_size(r, w)).collect(),
            (None, None) => vec![0; self.hidden_layers.len()],
        }
    }

    /// Tasks a run trains: one for joint training, otherwise one per label group.
    pub fn task_count(&self) -> usize {
        match self.mode {
            Mode::Joint => 1,
            _ => NUM_CLASSES / LABELS_PER_TASK,
        }
    }

    pub fn display_label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        let arch = join(&self.hidden_layers, "x");
        match self.mode {
            Mode::Gcsl => format!(
                "{}-gcsl-{arch}-v{}",
                self.dataset.dir_name(),
                join(&self.subspace_sizes(), "x")
            ),
            Mode::Naive => format!("{}-naive-{arch}", self.dataset.dir_name()),
            Mode::Joint => format!("{}-joint-{arch}", self.dataset.dir_name()),
        }
    }
}

/// `floor(ratio · width)`, tolerant of representation error such as `0.29 · 100`.
pub fn ratio_size(ratio: f64, width: usize) -> usize {
    ((ratio * width as f64) + 1e-9).floor() as usize
}

fn join(v: &[usize], sep: &str) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(sep)
}

/// Outcome of one seeded run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: usize,
    pub seed: u64,
    pub label_order: Vec<u8>,
    /// Accuracy on the accumulative validation set after each task.
    pub task_accuracies: Vec<f64>,
    pub final_accuracy: f64,
    /// Not written to result files so that they stay reproducible.
    #[serde(skip)]
    pub wall_time: Duration,
}

/// Equality ignores `wall_time`.
impl PartialEq for RunResult {
    fn eq(&self, other: &Self) -> bool {
        self.run_id == other.run_id
            && self.seed == other.seed
            && self.label_order == other.label_order
            && self.task_accuracies == other.task_accuracies
            && self.final_accuracy == other.final_accuracy
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator; 0 for a single run).
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl SummaryStats {
    pub fn two_sigma(&self) -> f64 {
        2.0 * self.std
    }
}

/// Statistics over the final accuracies of `results`.
pub fn summarize(results: &[RunResult]) -> Result<SummaryStats> {
    let values: Vec<f64> = results.iter().map(|r| r.final_accuracy).collect();
    summarize_values(&values)
}

pub fn summarize_values(values: &[f64]) -> Result<SummaryStats> {
    if values.is_empty() {
        return Err(Error::Config("cannot summarize an empty result set".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(SummaryStats {
        count: n,
        mean,
        std,
        min: sorted[0],
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q3: quantile(&sorted, 0.75),
        max: sorted[n - 1],
    })
}

/// Linear interpolation between closest ranks of an ascending slice.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Everything one experiment produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub runs: Vec<RunResult>,
    pub stats: SummaryStats,
}

/// Runs `config.runs` seeded runs on up to `workers` threads.
pub fn run_experiment(config: &ExperimentConfig, data: &DatasetPair, workers: usize) -> Result<ExperimentOutcome> {
    run_experiment_keeping(config, data, workers, None).map(|(outcome, _)| outcome)
}

/// [`run_experiment`], also returning the trained model of run `keep`.
pub fn run_experiment_keeping(
    config: &ExperimentConfig,
    data: &DatasetPair,
    workers: usize,
    keep: Option<usize>,
) -> Result<(ExperimentOutcome, Option<TrainedModel>)> {
    config.validate()?;
    check_data(data)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let finished: Vec<(RunResult, Option<TrainedModel>)> = pool.install(|| {
        (0..config.runs)
            .into_par_iter()
            .map(|i| run_single(config, data, i).map(|(r, m)| (r, (keep == Some(i)).then_some(m))))
            .collect::<Result<_>>()
    })?;
    let mut model = None;
    let mut runs = Vec::with_capacity(finished.len());
    for (r, m) in finished {
        model = model.or(m);
        runs.push(r);
    }
    runs.sort_by_key(|r| r.run_id);
    let stats = summarize(&runs)?;
    Ok((
        ExperimentOutcome {
            config: config.clone(),
            runs,
            stats,
        },
        model,
    ))
}

/// Environment variable naming the default data root.
pub const DATA_DIR_ENV: &str = "GCSL_DATA_DIR";

/// `root` itself when it holds the IDX files, otherwise `root/<dataset>`.
pub fn resolve_dataset_dir(root: &Path, dataset: DatasetKind) -> PathBuf {
    if root.join(crate::data::TRAIN_IMAGES).is_file() {
        root.to_path_buf()
    } else {
        root.join(dataset.dir_name())
    }
}

pub fn load_dataset(root: &Path, dataset: DatasetKind) -> Result<DatasetPair> {
    DatasetPair::load_dir(resolve_dataset_dir(root, dataset))
}

fn check_data(data: &DatasetPair) -> Result<()> {
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Data("dataset split is empty".into()));
    }
    Ok(())
}

/// Independent generator streams of one run.
pub struct RunStreams {
    pub order: Rng,
    pub init: Rng,
    pub train: Rng,
}

impl RunStreams {
    pub fn new(seed: u64) -> Self {
        let root = Rng::new(seed);
        RunStreams {
            order: root.split(0),
            init: root.split(1),
            train: root.split(2),
        }
    }
}

/// Final trained model of a run, when the mode has one worth keeping.
pub enum TrainedModel {
    Gcsl(Box<GcslModel>),
    Plain(Network),
}

/// Executes run `run_id` (seed `config.seed + run_id`).
pub fn run_single(config: &ExperimentConfig, data: &DatasetPair, run_id: usize) -> Result<(RunResult, TrainedModel)> {
    let started = Instant::now();
    let seed = config.seed.wrapping_add(run_id as u64);
    let mut streams = RunStreams::new(seed);
    let label_order = match config.label_order {
        LabelOrder::Sequential => sequential_label_order(),
        LabelOrder::Random => random_label_order(&mut streams.order),
    };
    let tasks = make_task_stream(data, &label_order, LABELS_PER_TASK)?;
    let (task_accuracies, model) = match config.mode {
        Mode::Gcsl => run_gcsl(config, data, &tasks, &mut streams)?,
        Mode::Naive => run_naive(config, data, &tasks, &mut streams)?,
        Mode::Joint => run_joint(config, data, &mut streams)?,
    };
    let final_accuracy = *task_accuracies.last().expect("at least one task");
    Ok((
        RunResult {
            run_id,
            seed,
            label_order,
            task_accuracies,
            final_accuracy,
            wall_time: started.elapsed(),
        },
        model,
    ))
}

fn run_gcsl(
    config: &ExperimentConfig,
    data: &DatasetPair,
    tasks: &[TaskSpec],
    streams: &mut RunStreams,
) -> Result<(Vec<f64>, TrainedModel)> {
    let sizes = config.subspace_sizes();
    let mut model = GcslModel::new(
        data.train.pixels_per_image(),
        &config.hidden_layers,
        NUM_CLASSES,
        config.bias,
        &mut streams.init,
    )
    .with_selection(config.eigen_selection);
    let mut seen = AccumulativeValidation::new();
    let mut accuracies = Vec::with_capacity(tasks.len());
    for task in tasks {
        if task.index > 0 {
            model.begin_task(&sizes, &mut streams.init)?;
        }
        let view = data.train.view(&task.train, &task.labels);
        model.train_task(
            &view,
            config.epochs_per_task,
            config.batch_size,
            &config.optimizer,
            &mut streams.train,
        )?;
        model.end_task(&view, &sizes, config.sample_limit)?;
        seen.accumulate(task)?;
        accuracies.push(evaluate(data, seen.indices(), |x| model.predict(x))?);
    }
    Ok((accuracies, TrainedModel::Gcsl(Box::new(model))))
}

fn run_naive(
    config: &ExperimentConfig,
    data: &DatasetPair,
    tasks: &[TaskSpec],
    streams: &mut RunStreams,
) -> Result<(Vec<f64>, TrainedModel)> {
    let mut net = Network::xavier(
        data.train.pixels_per_image(),
        &config.hidden_layers,
        NUM_CLASSES,
        config.bias,
        &mut streams.init,
    );
    let mut seen = AccumulativeValidation::new();
    let mut accuracies = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mut opt = Optimizer::new(config.optimizer);
        fit_checked(
            &mut net,
            data,
            &task.train,
            &Loss::MaskedBce(task.labels.clone()),
            config,
            &mut opt,
            streams,
        )?;
        seen.accumulate(task)?;
        accuracies.push(evaluate(data, seen.indices(), |x| net.predict(x))?);
    }
    Ok((accuracies, TrainedModel::Plain(net)))
}

fn run_joint(
    config: &ExperimentConfig,
    data: &DatasetPair,
    streams: &mut RunStreams,
) -> Result<(Vec<f64>, TrainedModel)> {
    let mut net = Network::xavier(
        data.train.pixels_per_image(),
        &config.hidden_layers,
        NUM_CLASSES,
        config.bias,
        &mut streams.init,
    );
    let all: Vec<usize> = (0..data.train.len()).collect();
    let mut opt = Optimizer::new(config.optimizer);
    fit_checked(&mut net, data, &all, &Loss::SoftmaxCe, config, &mut opt, streams)?;
    let test: Vec<usize> = (0..data.test.len()).collect();
    let acc = evaluate(data, &test, |x| net.predict(x))?;
    Ok((vec![acc], TrainedModel::Plain(net)))
}

fn fit_checked(
    net: &mut Network,
    data: &DatasetPair,
    indices: &[usize],
    loss: &Loss,
    config: &ExperimentConfig,
    opt: &mut Optimizer,
    streams: &mut RunStreams,
) -> Result<()> {
    let value = net.fit(
        &data.train.images,
        &data.train.labels,
        indices,
        loss,
        config.epochs_per_task,
        config.batch_size,
        opt,
        &mut streams.train,
    )?;
    if value.is_infinite() || (config.epochs_per_task > 0 && value.is_nan()) {
        return Err(Error::Numerical(format!("training loss diverged to {value}")));
    }
    Ok(())
}

/// Accuracy of `predict` on the listed test-split samples.
pub fn evaluate(data: &DatasetPair, indices: &[usize], predict: impl Fn(&Matrix) -> Result<Vec<u8>>) -> Result<f64> {
    let mut predictions = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        predictions.extend(predict(&data.test.images.select_rows(chunk))?);
    }
    Ok(data.test.accuracy(indices, &predictions))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

pub const CSV_HEADER: &str = "run_id,seed,label_order,task_index,accumulative_accuracy,final";

/// One row per (run, task). Label orders are written dash-separated.
pub fn results_csv(runs: &[RunResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in runs {
        let order = r.label_order.iter().map(u8::to_string).collect::<Vec<_>>().join("-");
        let last = r.task_accuracies.len().saturating_sub(1);
        for (k, acc) in r.task_accuracies.iter().enumerate() {
            let _ = writeln!(out, "{},{},{order},{k},{acc},{}", r.run_id, r.seed, k == last);
        }
    }
    out
}

pub fn results_json(outcome: &ExperimentOutcome) -> Result<String> {
    let mut s = serde_json::to_string_pretty(outcome).map_err(|e| Error::Json {
        context: "serializing results".into(),
        source: e,
    })?;
    s.push('\n');
    Ok(s)
}

pub fn parse_outcome_json(text: &str) -> Result<ExperimentOutcome> {
    serde_json::from_str(text).map_err(|e| Error::Json {
        context: "results".into(),
        source: e,
    })
}

pub fn emit_results(outcome: &ExperimentOutcome, path: &Path, format: OutputFormat) -> Result<()> {
    let body = match format {
        OutputFormat::Csv => results_csv(&outcome.runs),
        OutputFormat::Json => results_json(outcome)?,
    };
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// A named group of experiments.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub experiments: Vec<ExperimentConfig>,
}

pub const PRESET_NAMES: [&str; 6] = [
    "mnist-sizes",
    "mnist-layers",
    "fmnist-sizes",
    "fmnist-layers",
    "compare-mnist",
    "compare-fmnist",
];

pub const PRESET_BASE_SEED: u64 = 0;

fn base(
    dataset: DatasetKind,
    hidden: &[usize],
    optimizer: OptimizerSpec,
    epochs: usize,
    runs: usize,
    order: LabelOrder,
    mode: Mode,
) -> ExperimentConfig {
    ExperimentConfig {
        label: None,
        dataset,
        hidden_layers: hidden.to_vec(),
        v_sizes: None,
        v_ratio: None,
        epochs_per_task: epochs,
        batch_size: DEFAULT_BATCH_SIZE,
        optimizer,
        runs,
        seed: PRESET_BASE_SEED,
        label_order: order,
        mode,
        eigen_selection: EigenSelection::Smallest,
        sample_limit: None,
        bias: false,
    }
}

fn with_sizes(mut cfg: ExperimentConfig, sizes: &[usize]) -> ExperimentConfig {
    cfg.v_sizes = Some(sizes.to_vec());
    cfg
}

fn figure_preset(
    dataset: DatasetKind,
    hidden: &[usize],
    opt: OptimizerSpec,
    epochs: usize,
    configs: &[&[usize]],
) -> Vec<ExperimentConfig> {
    let make = |mode| base(dataset, hidden, opt, epochs, 25, LabelOrder::Sequential, mode);
    let mut out = vec![make(Mode::Joint), make(Mode::Naive)];
    out.extend(configs.iter().map(|s| with_sizes(make(Mode::Gcsl), s)));
    out
}

fn compare_preset(dataset: DatasetKind, ratio: f64, lr: f64) -> Vec<ExperimentConfig> {
    let mut out = Vec::new();
    for arch in [[20, 20], [100, 100], [400, 400]] {
        let make = |mode| base(dataset, &arch, OptimizerSpec::sgd(lr), 5, 10, LabelOrder::Random, mode);
        let mut gcsl = make(Mode::Gcsl);
        gcsl.v_ratio = Some(ratio);
        out.push(gcsl);
        out.push(make(Mode::Joint));
    }
    out
}

pub fn preset(name: &str) -> Result<Preset> {
    let mnist_opt = OptimizerSpec::sgd(0.05);
    let fmnist_opt = OptimizerSpec::adam(0.002, 0.9, 0.999);
    let experiments = match name {
        "mnist-sizes" => figure_preset(
            DatasetKind::Mnist,
            &[20, 20],
            mnist_opt,
            10,
            &[&[20, 20], &[10, 10], &[5, 5]],
        ),
        "mnist-layers" => figure_preset(DatasetKind::Mnist, &[20, 20], mnist_opt, 10, &[&[10, 0], &[0, 10]]),
        "fmnist-sizes" => figure_preset(
            DatasetKind::Fmnist,
            &[40, 20],
            fmnist_opt,
            5,
            &[&[40, 20], &[20, 10], &[10, 5]],
        ),
        "fmnist-layers" => figure_preset(DatasetKind::Fmnist, &[40, 20], fmnist_opt, 5, &[&[20, 0], &[0, 10]]),
        "compare-mnist" => compare_preset(DatasetKind::Mnist, 0.8, 0.01),
        "compare-fmnist" => compare_preset(DatasetKind::Fmnist, 0.5, 0.02),
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}'; valid presets: {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    let name = PRESET_NAMES.iter().find(|&&n| n == name).expect("matched above");
    Ok(Preset { name, experiments })
}
