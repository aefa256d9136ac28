//! Flat `key = value` experiment files.
//!
//! One setting per line, `#` starts a comment, keys are dotted section paths.
//! Unset keys keep the reference-benchmark defaults; unknown keys are errors.
//! Relative CSV paths resolve against the directory of the config file.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::ClassOrder;
use crate::engine::{DataSource, EvalMode, RunConfig};
use crate::hpsearch::HpSearchConfig;
use crate::samplers::{LossDirection, SamplerKind};
use crate::speed::TrackerMode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    Value { line: usize, key: String, msg: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub q_grid: Vec<f64>,
    pub s_grid: Vec<f64>,
    pub repeats: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { q_grid: vec![0.0, 0.2, 0.4], s_grid: vec![0.0, 0.2, 0.4], repeats: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub sweep: SweepConfig,
    pub hpsearch: HpSearchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig { run: RunConfig::reference(), sweep: SweepConfig::default(), hpsearch: HpSearchConfig::default() }
    }
}

pub fn load(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    parse(&text, path.parent().unwrap_or(Path::new(".")))
}

fn list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|x| x.trim().parse().map_err(|_| format!("`{}` is not a number", x.trim()))).collect()
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("`{v}` is not a number"))
}

fn pair(v: &str) -> std::result::Result<(f64, f64), String> {
    match list::<f64>(v)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err("expected two comma-separated numbers".into()),
    }
}

pub fn parse(text: &str, base_dir: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut csv_train: Option<PathBuf> = None;
    let mut csv_test: Option<PathBuf> = None;
    let mut source = String::from("shapes");
    let mut source_line = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError::Syntax { line, msg: format!("expected `key = value`, got `{content}`") });
        };
        let (key, value) = (key.trim(), value.trim());
        let bad = |msg: String| ConfigError::Value { line, key: key.to_string(), msg };
        let run = &mut cfg.run;
        let DataSource::Shapes(shapes) = &mut run.data else { unreachable!("data source set after parsing") };
        match key {
            "seed" => run.seed = num(value).map_err(bad)?,
            "data.source" => {
                source = value.to_string();
                source_line = line;
            }
            "data.train" => csv_train = Some(base_dir.join(value)),
            "data.test" => csv_test = Some(base_dir.join(value)),
            "data.classes" => shapes.num_classes = num(value).map_err(bad)?,
            "data.train_per_class" => shapes.train_per_class = num(value).map_err(bad)?,
            "data.test_per_class" => shapes.test_per_class = num(value).map_err(bad)?,
            "data.size" => shapes.hw = num(value).map_err(bad)?,
            "data.seed" => shapes.seed = num(value).map_err(bad)?,
            "data.noise" => shapes.noise = pair(value).map_err(bad)?,
            "data.contrast" => shapes.contrast = pair(value).map_err(bad)?,
            "data.jitter" => shapes.max_jitter = num(value).map_err(bad)?,
            "data.distractor" => shapes.distractor = pair(value).map_err(bad)?,
            "data.difficulty_power" => shapes.difficulty_power = num(value).map_err(bad)?,
            "data.modes" => shapes.modes = num(value).map_err(bad)?,
            "data.mode_decay" => shapes.mode_decay = num(value).map_err(bad)?,
            "data.mode_shift" => shapes.mode_shift = num(value).map_err(bad)?,
            "tasks.count" => run.num_tasks = num(value).map_err(bad)?,
            "tasks.order" => {
                run.class_order = match value {
                    "given" => ClassOrder::Given,
                    v => match v.strip_prefix("shuffled:") {
                        Some(seed) => ClassOrder::Shuffled(num(seed).map_err(bad)?),
                        None => return Err(bad("expected `given` or `shuffled:<seed>`".into())),
                    },
                }
            }
            "net.hidden" => run.hidden_widths = if value.is_empty() { vec![] } else { list(value).map_err(bad)? },
            "train.epochs" => run.hyper.epochs = num(value).map_err(bad)?,
            "train.batch_size" => run.hyper.batch_size = num(value).map_err(bad)?,
            "train.lr" => run.hyper.base_lr = num(value).map_err(bad)?,
            "train.momentum" => run.hyper.momentum = num(value).map_err(bad)?,
            "train.weight_decay" => run.hyper.weight_decay = num(value).map_err(bad)?,
            "buffer.capacity" => run.buffer_capacity = num(value).map_err(bad)?,
            "sampler.kind" => {
                run.sampler.kind = SamplerKind::parse(value).ok_or_else(|| bad(format!("unknown sampler `{value}`")))?
            }
            "sampler.q" => run.sampler.q = num(value).map_err(bad)?,
            "sampler.s" => run.sampler.s = num(value).map_err(bad)?,
            "sampler.k_augment" => run.sampler.k_augment = num(value).map_err(bad)?,
            "sampler.seed" => run.sampler.seed = num(value).map_err(bad)?,
            "sampler.loss_direction" => {
                run.sampler.loss_direction = match value {
                    "highest" => LossDirection::Highest,
                    "lowest" => LossDirection::Lowest,
                    _ => return Err(bad("expected `highest` or `lowest`".into())),
                }
            }
            "eval.mode" => {
                run.eval_mode = match value {
                    "til" => EvalMode::Til,
                    "cil" => EvalMode::Cil,
                    _ => return Err(bad("expected `til` or `cil`".into())),
                }
            }
            "tracker.mode" => {
                run.tracker_mode = match value {
                    "running_mean" => TrackerMode::RunningMean,
                    "full_matrix" => TrackerMode::FullMatrix,
                    _ => return Err(bad("expected `running_mean` or `full_matrix`".into())),
                }
            }
            "sweep.q" => cfg.sweep.q_grid = list(value).map_err(bad)?,
            "sweep.s" => cfg.sweep.s_grid = list(value).map_err(bad)?,
            "sweep.repeats" => cfg.sweep.repeats = num(value).map_err(bad)?,
            "hpsearch.q" => cfg.hpsearch.q_grid = list(value).map_err(bad)?,
            "hpsearch.s" => cfg.hpsearch.s_grid = list(value).map_err(bad)?,
            "hpsearch.repeats" => cfg.hpsearch.repeats = num(value).map_err(bad)?,
            "hpsearch.epoch_divisor" => cfg.hpsearch.epoch_divisor = num(value).map_err(bad)?,
            "hpsearch.holdout" => cfg.hpsearch.holdout = num(value).map_err(bad)?,
            "hpsearch.seed" => cfg.hpsearch.seed = num(value).map_err(bad)?,
            _ => return Err(ConfigError::UnknownKey { line, key: key.to_string() }),
        }
    }
    match source.as_str() {
        "shapes" => {}
        "csv" => {
            let missing = |k: &str| ConfigError::Value { line: source_line, key: "data.source".into(), msg: format!("csv needs `{k}`") };
            let train = csv_train.ok_or_else(|| missing("data.train"))?;
            let test = csv_test.ok_or_else(|| missing("data.test"))?;
            cfg.run.data = DataSource::Csv { train, test };
        }
        other => {
            return Err(ConfigError::Value {
                line: source_line,
                key: "data.source".into(),
                msg: format!("expected `shapes` or `csv`, got `{other}`"),
            })
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_reference() {
        assert_eq!(parse("", Path::new(".")).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn keys_map_to_fields() {
        let text = "\
# comment
seed = 7
net.hidden = 32,16
buffer.capacity = 50   # trailing comment
sampler.kind = sbs
sampler.q = 0.2
sampler.s = 0.3
eval.mode = cil
tracker.mode = full_matrix
tasks.order = shuffled:4
data.noise = 0.1, 0.2
sweep.q = 0,0.5
";
        let c = parse(text, Path::new(".")).unwrap();
        assert_eq!(c.run.seed, 7);
        assert_eq!(c.run.hidden_widths, vec![32, 16]);
        assert_eq!(c.run.buffer_capacity, 50);
        assert_eq!(c.run.sampler.kind, SamplerKind::Sbs);
        assert_eq!((c.run.sampler.q, c.run.sampler.s), (0.2, 0.3));
        assert_eq!(c.run.eval_mode, EvalMode::Cil);
        assert_eq!(c.run.tracker_mode, TrackerMode::FullMatrix);
        assert_eq!(c.run.class_order, ClassOrder::Shuffled(4));
        let DataSource::Shapes(s) = &c.run.data else { panic!() };
        assert_eq!(s.noise, (0.1, 0.2));
        assert_eq!(c.sweep.q_grid, vec![0.0, 0.5]);
    }

    #[test]
    fn csv_paths_resolve_against_config_dir() {
        let c = parse("data.source = csv\ndata.train = a.csv\ndata.test = b.csv\n", Path::new("/cfg")).unwrap();
        assert_eq!(c.run.data, DataSource::Csv { train: "/cfg/a.csv".into(), test: "/cfg/b.csv".into() });
        assert!(parse("data.source = csv\ndata.train = a.csv\n", Path::new(".")).is_err());
    }

    #[test]
    fn errors_name_the_line() {
        let e = parse("seed = 1\nbogus.key = 3\n", Path::new(".")).unwrap_err();
        assert!(matches!(e, ConfigError::UnknownKey { line: 2, .. }));
        let e = parse("train.epochs = many\n", Path::new(".")).unwrap_err();
        assert!(matches!(e, ConfigError::Value { line: 1, .. }));
        assert!(matches!(parse("no equals sign\n", Path::new(".")).unwrap_err(), ConfigError::Syntax { line: 1, .. }));
    }
}
