//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime or numeric
//! failure, 4 I/O error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::analysis::{self, AnalysisError};
use crate::config::{self, ConfigError, ExperimentConfig};
use crate::data::DataError;
use crate::engine::{self, EngineError, RunFailure, Stage, Tracking, TRACKING_FILE};
use crate::exec::{self, Execution};
use crate::hpsearch::{self, HpSearchError};
use crate::tensor::TensorError;

pub const OUT_ENV: &str = "REPLAY_LAB_OUT";
const DEFAULT_OUT: &str = "replay-lab-out";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "replay-lab", version, about = "Learning-speed analysis and speed-based replay sampling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Experiment file (`key = value` lines). Required except for `hpsearch --fixed`.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output directory. Defaults to $REPLAY_LAB_OUT, then `replay-lab-out`.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Concurrent experiments.
    #[arg(long, short, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub jobs: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write its manifest, metrics and tracking data.
    Train(Common),
    /// Sweep SBS (q, s) compositions against the uniform baseline.
    Sweep(Common),
    /// Pick (q, s) on a rotation stand-in for the next task.
    Hpsearch {
        #[command(flatten)]
        common: Common,
        /// Print the fixed fallback (0.2, 0.2) without training.
        #[arg(long)]
        fixed: bool,
    },
    /// Export a task's epoch-wise classification matrix from a finished run.
    ExportMatrix {
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        task: usize,
        /// Destination file. Defaults to `matrix_task<T>_<split>.csv` in the run directory.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Aggregate finished runs into the speed/remembering curve and, given at
    /// least four buffer sizes, the buffer-size correlation.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = analysis::DEFAULT_BINS)]
        bins: usize,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError { code: EXIT_CONFIG, message: message.into() }
    }

    fn io(path: &Path, err: std::io::Error) -> Self {
        CliError { code: EXIT_IO, message: format!("{}: {err}", path.display()) }
    }
}

fn data_code(e: &DataError) -> i32 {
    match e {
        DataError::Io { .. } => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let code = if matches!(e, ConfigError::Io { .. }) { EXIT_IO } else { EXIT_CONFIG };
        CliError { code, message: e.to_string() }
    }
}

impl From<RunFailure> for CliError {
    fn from(f: RunFailure) -> Self {
        let code = match (&f.stage, &f.error) {
            (_, EngineError::Io { .. }) => EXIT_IO,
            (_, EngineError::Data(d)) => data_code(d),
            (_, EngineError::Tensor(TensorError::NumericFailure { .. })) => EXIT_RUNTIME,
            (Stage::Config, _) | (_, EngineError::Config(_)) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        CliError { code, message: f.to_string() }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        let code = match e {
            AnalysisError::Config(_) => EXIT_CONFIG,
            AnalysisError::Io(_) => EXIT_IO,
            _ => EXIT_RUNTIME,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<HpSearchError> for CliError {
    fn from(e: HpSearchError) -> Self {
        let code = match &e {
            HpSearchError::Config(_) => EXIT_CONFIG,
            HpSearchError::Data(d) => data_code(d),
            HpSearchError::AllCellsFailed => EXIT_RUNTIME,
        };
        CliError { code, message: e.to_string() }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn out_dir(explicit: &Option<PathBuf>) -> PathBuf {
    explicit
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn setup(common: &Common) -> Result<(ExperimentConfig, PathBuf, Execution)> {
    let path = common.config.as_deref().ok_or_else(|| CliError::config("--config is required"))?;
    let mut cfg = config::load(path)?;
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
        cfg.hpsearch.seed = seed;
    }
    cfg.run.validate().map_err(|e| CliError::config(e.to_string()))?;
    exec::set_threads(common.jobs as usize);
    let exec = if common.jobs == 1 { Execution::Sequential } else { Execution::Parallel };
    Ok((cfg, out_dir(&common.out), exec))
}

fn cmd_train(common: &Common) -> Result<()> {
    let (mut cfg, out, _) = setup(common)?;
    cfg.run.output_dir = Some(out.clone());
    let result = engine::run_experiment(&cfg.run)?;
    println!("mean final accuracy {:.4}", result.mean_final_accuracy);
    println!("manifest {}", out.join(engine::MANIFEST_FILE).display());
    Ok(())
}

fn cmd_sweep(common: &Common) -> Result<()> {
    let (cfg, out, exec) = setup(common)?;
    let heatmap = analysis::composition_sweep(&cfg.run, &cfg.sweep.q_grid, &cfg.sweep.s_grid, cfg.sweep.repeats, exec)?;
    create_dir(&out)?;
    write(&out.join("heatmap.csv"), &heatmap.to_csv())?;
    let svg = out.join("heatmap.svg");
    analysis::render_heatmap_svg(&heatmap, &svg).map_err(|e| match e {
        AnalysisError::Io(err) => CliError::io(&svg, err),
        other => other.into(),
    })?;
    if let Some((q, s, c)) = heatmap.best() {
        println!("best q={q} s={s} delta={:+.4} stderr={:.4} n={}", c.mean_delta, c.stderr, c.n);
    }
    Ok(())
}

fn cmd_hpsearch(common: &Common, fixed: bool) -> Result<()> {
    if fixed {
        let (q, s) = hpsearch::fixed_qs();
        println!("q={q} s={s}");
        return Ok(());
    }
    let (cfg, out, exec) = setup(common)?;
    let tasks = cfg.run.build_tasks().map_err(|e| match e {
        EngineError::Data(d) => CliError { code: data_code(&d), message: d.to_string() },
        other => CliError::config(other.to_string()),
    })?;
    let result = hpsearch::select_qs_via_rotation(&tasks.tasks()[0], tasks.shape(), &cfg.run, &cfg.hpsearch, exec)?;
    create_dir(&out)?;
    write(&out.join("hpsearch_scores.csv"), &result.to_csv())?;
    println!("q={} s={}", result.q, result.s);
    Ok(())
}

fn load_tracking(run_dir: &Path) -> Result<Tracking> {
    let path = run_dir.join(TRACKING_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn cmd_export_matrix(run_dir: &Path, split: Split, task: usize, out: &Option<PathBuf>) -> Result<()> {
    let tracking = load_tracking(run_dir)?;
    let Some(matrices) = tracking.matrices else {
        return Err(CliError::config(format!(
            "{}: run used running-mean tracking; rerun with tracker.mode = full_matrix",
            run_dir.display()
        )));
    };
    let m = matrices
        .get(task)
        .ok_or_else(|| CliError::config(format!("run has {} tasks, asked for task {task}", matrices.len())))?;
    let (matrix, name) = match split {
        Split::Train => (&m.train, "train"),
        Split::Test => (&m.test, "test"),
    };
    let path = out.clone().unwrap_or_else(|| run_dir.join(format!("matrix_task{task}_{name}.csv")));
    write(&path, &matrix.to_csv())?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_report(runs: &[PathBuf], out: &Option<PathBuf>, bins: usize) -> Result<()> {
    let trackings = runs.iter().map(|r| load_tracking(r)).collect::<Result<Vec<_>>>()?;
    let out = out_dir(out);
    create_dir(&out)?;
    let curve = analysis::first_task_curve(&trackings, bins)?;
    write(&out.join("curve.csv"), &curve.to_csv())?;
    println!("speed vs remembered: r={:.4} over {} bins", curve.correlation.r, curve.correlation.n);
    let mut report = serde_json::json!({ "speed_vs_remembered": curve });
    let samples: Vec<(usize, f64)> = trackings
        .iter()
        .filter_map(|t| Some((t.buffer_capacity, analysis::remembered_mean_speed(t)?)))
        .collect();
    match analysis::size_speed_correlation(&samples) {
        Ok(c) => {
            println!("buffer size vs remembered speed: r={:.4} over {} sizes", c.r, c.n);
            report["buffer_size_vs_speed"] = serde_json::to_value(&c).expect("report serializes");
        }
        Err(e) => log::info!("no buffer-size correlation: {e}"),
    }
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write(&out.join("report.json"), &json)
}

/// Parse arguments, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let outcome = match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Sweep(c) => cmd_sweep(c),
        Command::Hpsearch { common, fixed } => cmd_hpsearch(common, *fixed),
        Command::ExportMatrix { run_dir, split, task, out } => cmd_export_matrix(run_dir, *split, *task, out),
        Command::Report { runs, out, bins } => cmd_report(runs, out, *bins),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_failures_are_runtime_errors() {
        let f = RunFailure { stage: Stage::Train(0), error: TensorError::NumericFailure { epoch: 1, batch: 2 }.into() };
        assert_eq!(CliError::from(f).code, EXIT_RUNTIME);
        let f = RunFailure { stage: Stage::Config, error: EngineError::Config("x".into()) };
        assert_eq!(CliError::from(f).code, EXIT_CONFIG);
    }

    #[test]
    fn bad_arguments_are_config_errors() {
        assert_eq!(run(["replay-lab", "train"]), EXIT_CONFIG);
        assert_eq!(run(["replay-lab", "frobnicate"]), EXIT_CONFIG);
    }
}
