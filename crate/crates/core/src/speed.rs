//! Per-example learning speed: the fraction of epochs during a task's
//! training at which the model classified an example correctly.
//!
//! Two storage modes are offered. `FullMatrix` keeps the whole epoch-wise
//! classification matrix (E rows, one column per example) so it can be
//! exported; `RunningMean` keeps one accumulator per example. Accumulators
//! hold exact integer counts, so both modes report bit-identical speeds.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ExampleId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackingError {
    #[error("epoch {epoch} outside [0, {epochs})")]
    EpochRange { epoch: usize, epochs: usize },
    #[error("epoch {0} already recorded")]
    DoubleRecord(usize),
    #[error("example {0} is not tracked")]
    UnknownId(ExampleId),
    #[error("no correctness given for tracked example {0}")]
    MissingId(ExampleId),
    #[error("example {0} tracked twice")]
    DuplicateId(ExampleId),
    #[error("only {recorded} of {epochs} epochs recorded")]
    Incomplete { recorded: usize, epochs: usize },
    #[error("tracker needs at least one epoch")]
    NoEpochs,
    #[error("classification matrix is only kept in full-matrix mode")]
    NoMatrix,
}

pub type Result<T> = std::result::Result<T, TrackingError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TrackerMode {
    FullMatrix,
    #[default]
    RunningMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalSplit {
    Train,
    Test,
}

impl EvalSplit {
    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::Train => "train",
            EvalSplit::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum State {
    Matrix(Vec<Vec<bool>>),
    Mean(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedTracker {
    epochs: usize,
    ids: Vec<ExampleId>,
    index: HashMap<ExampleId, usize>,
    recorded: Vec<bool>,
    state: State,
}

impl SpeedTracker {
    pub fn new(mode: TrackerMode, epochs: usize, ids: &[ExampleId]) -> Result<Self> {
        if epochs == 0 {
            return Err(TrackingError::NoEpochs);
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (col, &id) in ids.iter().enumerate() {
            if index.insert(id, col).is_some() {
                return Err(TrackingError::DuplicateId(id));
            }
        }
        let state = match mode {
            TrackerMode::FullMatrix => State::Matrix(Vec::with_capacity(epochs)),
            TrackerMode::RunningMean => State::Mean(vec![0.0; ids.len()]),
        };
        Ok(SpeedTracker { epochs, ids: ids.to_vec(), index, recorded: vec![false; epochs], state })
    }

    pub fn mode(&self) -> TrackerMode {
        match self.state {
            State::Matrix(_) => TrackerMode::FullMatrix,
            State::Mean(_) => TrackerMode::RunningMean,
        }
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn ids(&self) -> &[ExampleId] {
        &self.ids
    }

    pub fn recorded_epochs(&self) -> usize {
        self.recorded.iter().filter(|&&r| r).count()
    }

    /// Record which tracked examples were classified correctly after `epoch`.
    /// `correctness` must cover exactly the tracked ids.
    pub fn record_epoch<I>(&mut self, epoch: usize, correctness: I) -> Result<()>
    where
        I: IntoIterator<Item = (ExampleId, bool)>,
    {
        if epoch >= self.epochs {
            return Err(TrackingError::EpochRange { epoch, epochs: self.epochs });
        }
        if self.recorded[epoch] {
            return Err(TrackingError::DoubleRecord(epoch));
        }
        let mut row: Vec<Option<bool>> = vec![None; self.ids.len()];
        for (id, ok) in correctness {
            let col = *self.index.get(&id).ok_or(TrackingError::UnknownId(id))?;
            if row[col].replace(ok).is_some() {
                return Err(TrackingError::DuplicateId(id));
            }
        }
        let row: Vec<bool> = row
            .into_iter()
            .enumerate()
            .map(|(col, v)| v.ok_or(TrackingError::MissingId(self.ids[col])))
            .collect::<Result<_>>()?;
        match &mut self.state {
            State::Matrix(m) => {
                // Rows may arrive out of order; keep them indexed by epoch.
                if m.is_empty() {
                    m.resize(self.epochs, Vec::new());
                }
                m[epoch] = row;
            }
            State::Mean(acc) => {
                for (a, ok) in acc.iter_mut().zip(row) {
                    if ok {
                        *a += 1.0;
                    }
                }
            }
        }
        self.recorded[epoch] = true;
        Ok(())
    }

    fn check_complete(&self) -> Result<()> {
        let recorded = self.recorded_epochs();
        if recorded < self.epochs {
            return Err(TrackingError::Incomplete { recorded, epochs: self.epochs });
        }
        Ok(())
    }

    /// Per-example speed, `(correct epochs) / E`.
    pub fn learning_speeds(&self, task_index: usize, split: EvalSplit) -> Result<SpeedReport> {
        self.check_complete()?;
        let e = self.epochs as f64;
        let counts: Vec<f64> = match &self.state {
            State::Matrix(m) => (0..self.ids.len())
                .map(|col| m.iter().filter(|row| row[col]).count() as f64)
                .collect(),
            State::Mean(acc) => acc.clone(),
        };
        let speeds = self.ids.iter().zip(counts).map(|(&id, c)| (id, c / e)).collect();
        Ok(SpeedReport { speeds, task_index, evaluated_on: split })
    }

    /// The full epoch-wise classification matrix, one row per epoch.
    pub fn matrix(&self) -> Result<ClassificationMatrix> {
        self.check_complete()?;
        match &self.state {
            State::Matrix(m) => Ok(ClassificationMatrix { ids: self.ids.clone(), rows: m.clone() }),
            State::Mean(_) => Err(TrackingError::NoMatrix),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedReport {
    pub speeds: BTreeMap<ExampleId, f64>,
    pub task_index: usize,
    pub evaluated_on: EvalSplit,
}

impl SpeedReport {
    pub fn get(&self, id: ExampleId) -> Option<f64> {
        self.speeds.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.speeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speeds.is_empty()
    }

    pub fn mean_over<'a, I: IntoIterator<Item = &'a ExampleId>>(&self, ids: I) -> Option<f64> {
        let (sum, n) = ids
            .into_iter()
            .filter_map(|id| self.get(*id))
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

/// Epoch-wise classification matrix: `rows[e][i]` is whether `ids[i]` was
/// classified correctly after epoch `e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMatrix {
    pub ids: Vec<ExampleId>,
    pub rows: Vec<Vec<bool>>,
}

impl ClassificationMatrix {
    pub fn epochs(&self) -> usize {
        self.rows.len()
    }

    /// Export with one line per example, sorted by descending learning speed
    /// (ties by ascending id), one column per epoch.
    pub fn to_csv(&self) -> String {
        let e = self.rows.len();
        let mut cols: Vec<(usize, usize)> = (0..self.ids.len())
            .map(|c| (c, self.rows.iter().filter(|r| r[c]).count()))
            .collect();
        cols.sort_by(|a, b| b.1.cmp(&a.1).then(self.ids[a.0].cmp(&self.ids[b.0])));
        let mut out = String::from("example_id");
        for i in 0..e {
            let _ = write!(out, ",epoch_{i}");
        }
        out.push('\n');
        for (c, _) in cols {
            let _ = write!(out, "{}", self.ids[c]);
            for row in &self.rows {
                out.push_str(if row[c] { ",1" } else { ",0" });
            }
            out.push('\n');
        }
        out
    }
}

/// Examples correct at the end of their own task and at the end of the sequence.
pub fn remembered_set(
    correct_at_own_task_end: &BTreeSet<ExampleId>,
    correct_at_sequence_end: &BTreeSet<ExampleId>,
) -> BTreeSet<ExampleId> {
    correct_at_own_task_end.intersection(correct_at_sequence_end).copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(mode: TrackerMode, pattern: &[Vec<bool>], ids: &[ExampleId]) -> SpeedReport {
        let mut t = SpeedTracker::new(mode, pattern.len(), ids).unwrap();
        for (e, row) in pattern.iter().enumerate() {
            t.record_epoch(e, ids.iter().copied().zip(row.iter().copied())).unwrap();
        }
        t.learning_speeds(0, EvalSplit::Train).unwrap()
    }

    #[test]
    fn constant_patterns() {
        for mode in [TrackerMode::FullMatrix, TrackerMode::RunningMean] {
            let ids = [3, 1, 2];
            let all_true = vec![vec![true; 3]; 5];
            assert!(run(mode, &all_true, &ids).speeds.values().all(|&s| s == 1.0));
            let all_false = vec![vec![false; 3]; 5];
            assert!(run(mode, &all_false, &ids).speeds.values().all(|&s| s == 0.0));
        }
    }

    #[test]
    fn alternating_pattern_is_half() {
        let p: Vec<Vec<bool>> = [true, false, true, false].iter().map(|&b| vec![b]).collect();
        assert_eq!(run(TrackerMode::RunningMean, &p, &[42]).get(42), Some(0.5));
    }

    #[test]
    fn late_learner_speed() {
        let p: Vec<Vec<bool>> = (0..100).map(|e| vec![e >= 50]).collect();
        assert_eq!(run(TrackerMode::FullMatrix, &p, &[0]).get(0), Some(0.5));
    }

    #[test]
    fn tracking_errors() {
        let mut t = SpeedTracker::new(TrackerMode::RunningMean, 2, &[1, 2]).unwrap();
        assert_eq!(t.record_epoch(0, [(1, true)]), Err(TrackingError::MissingId(2)));
        assert_eq!(t.record_epoch(0, [(1, true), (2, true), (3, true)]), Err(TrackingError::UnknownId(3)));
        t.record_epoch(0, [(1, true), (2, false)]).unwrap();
        assert_eq!(t.record_epoch(0, [(1, true), (2, false)]), Err(TrackingError::DoubleRecord(0)));
        assert_eq!(t.record_epoch(2, [(1, true), (2, false)]), Err(TrackingError::EpochRange { epoch: 2, epochs: 2 }));
        assert_eq!(
            t.learning_speeds(0, EvalSplit::Train),
            Err(TrackingError::Incomplete { recorded: 1, epochs: 2 })
        );
        assert_eq!(SpeedTracker::new(TrackerMode::FullMatrix, 2, &[1, 1]).err(), Some(TrackingError::DuplicateId(1)));
        assert_eq!(t.matrix().err(), Some(TrackingError::Incomplete { recorded: 1, epochs: 2 }));
    }

    #[test]
    fn record_order_of_ids_irrelevant() {
        let mut a = SpeedTracker::new(TrackerMode::FullMatrix, 1, &[1, 2, 3]).unwrap();
        let mut b = a.clone();
        a.record_epoch(0, [(1, true), (2, false), (3, true)]).unwrap();
        b.record_epoch(0, [(3, true), (1, true), (2, false)]).unwrap();
        assert_eq!(a.learning_speeds(0, EvalSplit::Test), b.learning_speeds(0, EvalSplit::Test));
    }

    #[test]
    fn matrix_export_sorted_by_speed() {
        let mut t = SpeedTracker::new(TrackerMode::FullMatrix, 3, &[10, 11, 12]).unwrap();
        t.record_epoch(0, [(10, false), (11, true), (12, true)]).unwrap();
        t.record_epoch(1, [(10, false), (11, true), (12, false)]).unwrap();
        t.record_epoch(2, [(10, true), (11, true), (12, true)]).unwrap();
        let csv = t.matrix().unwrap().to_csv();
        assert_eq!(csv, "example_id,epoch_0,epoch_1,epoch_2\n11,1,1,1\n12,1,0,1\n10,0,0,1\n");
        let mean = SpeedTracker::new(TrackerMode::RunningMean, 1, &[1]).unwrap();
        assert_eq!(mean.matrix().err(), Some(TrackingError::Incomplete { recorded: 0, epochs: 1 }));
    }

    #[test]
    fn remembered_is_intersection() {
        let a: BTreeSet<u64> = [1, 2, 3].into();
        let b: BTreeSet<u64> = [2, 3, 4].into();
        assert_eq!(remembered_set(&a, &b), [2, 3].into());
        assert_eq!(remembered_set(&a, &a), a);
        assert!(remembered_set(&a, &BTreeSet::new()).is_empty());
    }
}
