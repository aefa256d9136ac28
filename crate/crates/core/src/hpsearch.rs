//! Choosing the SBS fractions (q, s) without a labeled future task.
//!
//! The first task is followed by a self-supervised stand-in: every image of
//! the task rotated by a random multiple of 90°, labeled with the rotation.
//! Each grid cell replays the first task through an SBS(q, s) buffer while the
//! network learns the rotations, and the cell keeping the most first-task
//! accuracy wins. Rule of thumb for manual tuning: easier tasks tolerate a
//! larger q and a smaller s.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{check_grid, mean_stderr, AnalysisError};
use crate::data::{rotation_task, DataError, Dataset, Example, RotationMode, Task, TaskSequence};
use crate::engine::{run_on_tasks, RunConfig};
use crate::exec::Execution;
use crate::samplers::SamplerConfig;
use crate::seeds;
use crate::tensor::InputDims;

#[derive(Debug, Error)]
pub enum HpSearchError {
    #[error("invalid search configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("every grid cell failed")]
    AllCellsFailed,
}

impl From<AnalysisError> for HpSearchError {
    fn from(e: AnalysisError) -> Self {
        HpSearchError::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, HpSearchError>;

/// The fallback fractions.
pub const FIXED_QS: (f64, f64) = (0.2, 0.2);

pub fn fixed_qs() -> (f64, f64) {
    FIXED_QS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpSearchConfig {
    pub q_grid: Vec<f64>,
    pub s_grid: Vec<f64>,
    pub repeats: usize,
    /// Auxiliary runs train for `max(1, epochs / epoch_divisor)` epochs per task.
    pub epoch_divisor: usize,
    /// Share of the task's training examples held out to score cells.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for HpSearchConfig {
    fn default() -> Self {
        let grid: Vec<f64> = (0..=8).map(|k| k as f64 / 10.0).collect();
        HpSearchConfig { q_grid: grid.clone(), s_grid: grid, repeats: 3, epoch_divisor: 2, holdout: 0.2, seed: 0 }
    }
}

impl HpSearchConfig {
    pub fn validate(&self) -> Result<()> {
        check_grid("q", &self.q_grid)?;
        check_grid("s", &self.s_grid)?;
        if self.repeats == 0 {
            return Err(HpSearchError::Config("repeats must be positive".into()));
        }
        if self.epoch_divisor == 0 {
            return Err(HpSearchError::Config("epoch_divisor must be positive".into()));
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(HpSearchError::Config(format!("holdout must lie in (0, 1), got {}", self.holdout)));
        }
        Ok(())
    }

    /// Grid cells with `q + s < 1`, by ascending q then s.
    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.q_grid
            .iter()
            .flat_map(|&q| self.s_grid.iter().filter(move |&&s| q + s < 1.0).map(move |&s| (q, s)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub q: f64,
    pub s: f64,
    pub mean_final_acc: f64,
    pub stderr: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpSearchResult {
    pub q: f64,
    pub s: f64,
    /// One row per cell with at least one successful run, in grid order.
    pub table: Vec<ScoreRow>,
}

impl HpSearchResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("q,s,mean_final_acc,stderr,n\n");
        for r in &self.table {
            let _ = writeln!(out, "{},{},{},{},{}", r.q, r.s, r.mean_final_acc, r.stderr, r.n);
        }
        out
    }
}

/// Highest mean score; ties go to the earlier row, i.e. smaller q then smaller s.
pub fn argmax(table: &[ScoreRow]) -> Option<&ScoreRow> {
    table.iter().fold(None, |best: Option<&ScoreRow>, row| match best {
        Some(b) if b.mean_final_acc >= row.mean_final_acc => Some(b),
        _ => Some(row),
    })
}

/// Build the two-task search sequence from one task's training examples:
/// the task itself (classes relabeled to `0..k`, a held-out share as its test
/// split) followed by the four-way rotation task over the same images
/// (labels `k..k+4`, fresh ids).
pub fn rotation_sequence(task: &Task, shape: InputDims, holdout: f64, seed: u64) -> Result<TaskSequence> {
    if shape.height != shape.width {
        return Err(DataError::Shape(format!("rotation needs square images, got {}x{}", shape.height, shape.width)).into());
    }
    let k = task.classes.len();
    let relabel = |ex: &Example| Example {
        label: task.classes.binary_search(&ex.label).expect("label owned by task"),
        ..ex.clone()
    };
    let mut examples: Vec<Example> = task.train.iter().map(relabel).collect();
    examples.shuffle(&mut seeds::rng(seeds::derive(seed, "holdout")));
    if examples.len() < 2 {
        return Err(HpSearchError::Config("task too small to hold out examples".into()));
    }
    let n_hold = ((examples.len() as f64 * holdout).round() as usize).clamp(1, examples.len() - 1);
    let mut fit = examples.split_off(n_hold);
    let mut hold = examples;
    fit.sort_by_key(|e| e.id);
    hold.sort_by_key(|e| e.id);

    let id_offset = task.train.iter().map(|e| e.id).max().unwrap_or(0) + 1;
    let rotate = |part: &[Example], tag: &str| -> Result<Vec<Example>> {
        let ds = Dataset::new(shape, k, part.to_vec())?;
        let rotated = rotation_task(&ds, RotationMode::FourWay, seeds::derive(seed, tag))?;
        Ok(rotated
            .examples()
            .iter()
            .map(|e| Example { id: e.id + id_offset, label: e.label + k, features: e.features.clone() })
            .collect())
    };
    let rot_train = rotate(&fit, "rotation-train")?;
    let rot_test = rotate(&hold, "rotation-test")?;
    let original = Task { index: 0, classes: (0..k).collect(), train: fit, test: hold };
    let rotation = Task { index: 1, classes: (k..k + 4).collect(), train: rot_train, test: rot_test };
    Ok(TaskSequence::from_tasks(shape, k + 4, vec![original, rotation])?)
}

/// Score every grid cell on the rotation stand-in and return the best (q, s).
///
/// `base` supplies the network, optimizer, buffer capacity and evaluation
/// mode; its sampler is replaced by SBS(q, s) per cell and its epoch budget is
/// divided by `cfg.epoch_divisor`.
pub fn select_qs_via_rotation(
    task: &Task,
    shape: InputDims,
    base: &RunConfig,
    cfg: &HpSearchConfig,
    exec: Execution,
) -> Result<HpSearchResult> {
    cfg.validate()?;
    let sequence = rotation_sequence(task, shape, cfg.holdout, cfg.seed)?;
    let cells = cfg.cells();
    let seeds = seeds::replicate_seeds(cfg.seed, cfg.repeats);
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let scores = exec.map(jobs, |(c, seed)| {
        let (q, s) = cells[c];
        let mut run = base.clone();
        run.num_tasks = 2;
        run.sampler = SamplerConfig { seed: base.sampler.seed, ..SamplerConfig::sbs(q, s) };
        run.hyper.epochs = (base.hyper.epochs / cfg.epoch_divisor).max(1);
        run.seed = seed;
        run.output_dir = None;
        match run_on_tasks(&run, &sequence) {
            Ok(r) => {
                log::info!("search cell q={q} s={s} seed={seed}: first-task accuracy {:.4}", r.final_accuracies[0]);
                Some(r.final_accuracies[0])
            }
            Err(e) => {
                log::warn!("search cell q={q} s={s} seed={seed} failed: {}", e.error);
                None
            }
        }
    });
    let table: Vec<ScoreRow> = scores
        .chunks(cfg.repeats)
        .zip(&cells)
        .filter_map(|(runs, &(q, s))| {
            let ok: Vec<f64> = runs.iter().flatten().copied().collect();
            if ok.is_empty() {
                return None;
            }
            let (mean_final_acc, stderr) = mean_stderr(&ok);
            Some(ScoreRow { q, s, mean_final_acc, stderr, n: ok.len() })
        })
        .collect();
    let best = *argmax(&table).ok_or(HpSearchError::AllCellsFailed)?;
    Ok(HpSearchResult { q: best.q, s: best.s, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shapes, split_into_tasks, ClassOrder, ShapesConfig};

    #[test]
    fn fixed_fractions() {
        assert_eq!(fixed_qs(), (0.2, 0.2));
        assert_eq!(fixed_qs(), fixed_qs());
        let (q, s) = fixed_qs();
        assert!(q + s < 1.0);
    }

    #[test]
    fn default_grid_respects_budget() {
        let cells = HpSearchConfig::default().cells();
        // Tenths i, j in 0..=8 with i + j < 10.
        let expected = (0..=8).flat_map(|i| (0..=8).map(move |j| (i, j))).filter(|(i, j)| i + j < 10).count();
        assert_eq!(expected, 53);
        assert_eq!(cells.len(), expected);
        assert!(cells.iter().all(|(q, s)| q + s < 1.0));
        assert_eq!(cells[0], (0.0, 0.0));
    }

    #[test]
    fn ties_prefer_smaller_fractions() {
        let row = |q, s, m| ScoreRow { q, s, mean_final_acc: m, stderr: 0.0, n: 1 };
        let table = [row(0.0, 0.2, 0.5), row(0.1, 0.0, 0.7), row(0.2, 0.0, 0.7)];
        assert_eq!(argmax(&table).unwrap().q, 0.1);
    }

    #[test]
    fn sequence_holds_out_and_rotates() {
        let data = generate_shapes(&ShapesConfig::new(4, 20, 8, 1)).unwrap();
        let tasks = split_into_tasks(&data, 2, ClassOrder::Given).unwrap();
        let seq = rotation_sequence(&tasks.tasks()[1], tasks.shape(), 0.2, 3).unwrap();
        let [orig, rot] = seq.tasks() else { panic!("two tasks") };
        assert_eq!(orig.test.len(), 8);
        assert_eq!(orig.train.len(), 32);
        assert_eq!(orig.classes, vec![0, 1]);
        assert_eq!(rot.classes, vec![2, 3, 4, 5]);
        assert_eq!(rot.train.len(), orig.train.len());
        let source: Vec<u64> = tasks.tasks()[1].train.iter().map(|e| e.id).collect();
        assert!(orig.train.iter().chain(&orig.test).all(|e| source.contains(&e.id)));
    }
}
