//! `gcsl`: run GCSL experiments, presets and checkpoint inspection.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data or IO error,
//! 3 numerical failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gcsl_core::checkpoint::{self, CheckpointSummary};
use gcsl_core::experiments::{
    self, load_dataset, run_experiment_keeping, summarize_values, ExperimentConfig, ExperimentOutcome, OutputFormat,
    TrainedModel, DATA_DIR_ENV, PRESET_NAMES,
};
use gcsl_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "gcsl",
    version,
    about = "Class-incremental learning with gradient correlation subspaces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the experiment described by a JSON config file.
    Run(RunArgs),
    /// Run one of the built-in experiment groups.
    Preset(PresetArgs),
    /// Summarize a results file written by `run` or `preset`.
    Stats(StatsArgs),
    /// Describe a checkpoint file.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Data root holding mnist/ and fashion-mnist/, or a directory with the four IDX files.
    #[arg(long, env = DATA_DIR_ENV, default_value = "data")]
    data_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Parallel runs.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Results file; defaults to results/<label>.<format>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Save the final model of run 0 here.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct PresetArgs {
    /// Preset name.
    #[arg(long, required_unless_present = "list")]
    name: Option<String>,
    /// Print the preset names and exit.
    #[arg(long)]
    list: bool,
    /// Output directory; defaults to results/<name>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the number of runs.
    #[arg(long)]
    runs: Option<usize>,
    /// Override the epochs per task.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Limit the samples used for each correlation pass.
    #[arg(long)]
    sample_limit: Option<usize>,
    /// Run only experiments whose label contains this text.
    #[arg(long)]
    only: Option<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Results file (.csv or .json).
    #[arg(long)]
    results: PathBuf,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Shape { .. } | Error::State(_) | Error::Json { .. } => 1,
        Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) => 2,
        Error::Numerical(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Preset(args) => cmd_preset(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let config = ExperimentConfig::load(&args.config)?;
    let format = OutputFormat::from(args.common.format);
    let out = args
        .out
        .unwrap_or_else(|| Path::new("results").join(format!("{}.{}", config.display_label(), format.extension())));
    let data = load_dataset(&args.common.data_dir, config.dataset)?;
    let keep = args.checkpoint.as_ref().map(|_| 0);
    let (outcome, model) = run_experiment_keeping(&config, &data, args.common.workers, keep)?;
    write_outcome(&outcome, &out, format)?;
    if let (Some(path), Some(model)) = (&args.checkpoint, model) {
        save_model(&model, config.task_count(), path)?;
    }
    print_table(&[(&outcome, out.as_path())]);
    Ok(())
}

fn cmd_preset(args: PresetArgs) -> Result<()> {
    if args.list {
        for name in PRESET_NAMES {
            println!("{name}");
        }
        return Ok(());
    }
    let name = args.name.as_deref().expect("clap enforces --name");
    let preset = experiments::preset(name)?;
    let mut configs = preset.experiments;
    for cfg in &mut configs {
        if let Some(r) = args.runs {
            cfg.runs = r;
        }
        if let Some(e) = args.epochs {
            cfg.epochs_per_task = e;
        }
        if let Some(s) = args.seed {
            cfg.seed = s;
        }
        if let Some(lr) = args.lr {
            cfg.optimizer.lr = lr;
        }
        if args.sample_limit.is_some() {
            cfg.sample_limit = args.sample_limit;
        }
        cfg.validate()?;
    }
    if let Some(filter) = &args.only {
        configs.retain(|c| c.display_label().contains(filter.as_str()));
        if configs.is_empty() {
            return Err(Error::Config(format!(
                "no experiment of preset {name} matches '{filter}'"
            )));
        }
    }
    let format = OutputFormat::from(args.common.format);
    let dir = args.out.unwrap_or_else(|| Path::new("results").join(name));
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;

    let mut loaded = BTreeMap::new();
    let mut finished = Vec::new();
    for cfg in &configs {
        let data = match loaded.entry(cfg.dataset.dir_name()) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(load_dataset(&args.common.data_dir, cfg.dataset)?)
            }
        };
        let (outcome, _) = run_experiment_keeping(cfg, data, args.common.workers, None)?;
        let path = dir.join(format!("{}.{}", cfg.display_label(), format.extension()));
        write_outcome(&outcome, &path, format)?;
        finished.push((outcome, path));
    }
    let rows: Vec<(&ExperimentOutcome, &Path)> = finished.iter().map(|(o, p)| (o, p.as_path())).collect();
    print_table(&rows);
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> Result<()> {
    let text = fs::read_to_string(&args.results).map_err(|e| io_error(&args.results, e))?;
    let finals = if args.results.extension().is_some_and(|e| e == "json") {
        let outcome: ExperimentOutcome = serde_json_from(&text, &args.results)?;
        outcome.runs.iter().map(|r| r.final_accuracy).collect::<Vec<_>>()
    } else {
        final_accuracies_from_csv(&text, &args.results)?
    };
    let s = summarize_values(&finals)?;
    println!("runs    mean     ±2σ      min      q1       median   q3       max");
    println!(
        "{:<7} {:<8.4} {:<8.4} {:<8.4} {:<8.4} {:<8.4} {:<8.4} {:.4}",
        s.count,
        s.mean,
        s.two_sigma(),
        s.min,
        s.q1,
        s.median,
        s.q3,
        s.max
    );
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let model = checkpoint::load(&args.checkpoint)?;
    print!("{}", CheckpointSummary::of(&model));
    Ok(())
}

fn serde_json_from(text: &str, path: &Path) -> Result<ExperimentOutcome> {
    experiments::parse_outcome_json(text).map_err(|e| match e {
        Error::Json { source, .. } => Error::Data(format!("{}: {source}", path.display())),
        other => other,
    })
}

fn final_accuracies_from_csv(text: &str, path: &Path) -> Result<Vec<f64>> {
    let bad = |line: usize, why: &str| Error::Data(format!("{}:{line}: {why}", path.display()));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == experiments::CSV_HEADER => {}
        _ => return Err(bad(1, "unexpected header")),
    }
    let mut finals = Vec::new();
    for (i, line) in lines {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(bad(i + 1, "expected 6 columns"));
        }
        if cols[5] == "true" {
            finals.push(cols[4].parse::<f64>().map_err(|_| bad(i + 1, "bad accuracy"))?);
        }
    }
    Ok(finals)
}

fn write_outcome(outcome: &ExperimentOutcome, path: &Path, format: OutputFormat) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    experiments::emit_results(outcome, path, format)
}

fn save_model(model: &TrainedModel, tasks: usize, path: &Path) -> Result<()> {
    let model = match model {
        TrainedModel::Gcsl(m) => (**m).clone(),
        TrainedModel::Plain(net) => checkpoint::from_network(net, tasks)?,
    };
    checkpoint::save(&model, path)
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::io(path, source)
}

fn print_table(rows: &[(&ExperimentOutcome, &Path)]) {
    let width = rows
        .iter()
        .map(|(o, _)| o.config.display_label().len())
        .max()
        .unwrap_or(0)
        .max("experiment".len());
    println!(
        "{:<width$}  runs  mean    ±2σ     min     median  max     time/run  file",
        "experiment"
    );
    for (o, path) in rows {
        let s = &o.stats;
        let secs: f64 = o.runs.iter().map(|r| r.wall_time.as_secs_f64()).sum::<f64>() / o.runs.len() as f64;
        println!(
            "{:<width$}  {:<4}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}  {:>7.1}s  {}",
            o.config.display_label(),
            s.count,
            s.mean,
            s.two_sigma(),
            s.min,
            s.median,
            s.max,
            secs,
            path.display()
        );
    }
}
