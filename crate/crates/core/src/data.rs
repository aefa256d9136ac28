//! Labeled image datasets with stable example ids, class-partitioned task
//! sequences, a synthetic oriented-pattern generator, rotation and
//! random-label transforms, and CSV ingestion.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds;
use crate::tensor::{InputDims, Matrix};

pub type ExampleId = u64;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot split {num_classes} classes into {tasks} equal tasks")]
    Partition { num_classes: usize, tasks: usize },
    #[error("invalid dataset configuration: {0}")]
    Config(String),
    #[error("{path}: line {line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("dataset invariant violated: {0}")]
    Invariant(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: ExampleId,
    /// Row-major H x W x C pixel values in [0, 1].
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    shape: InputDims,
    num_classes: usize,
    examples: Vec<Example>,
}

impl Dataset {
    pub fn new(shape: InputDims, num_classes: usize, examples: Vec<Example>) -> Result<Self> {
        if shape.flat() == 0 {
            return Err(DataError::Config("image shape must be non-empty".into()));
        }
        if num_classes == 0 {
            return Err(DataError::Config("dataset needs at least one class".into()));
        }
        let mut seen = HashSet::with_capacity(examples.len());
        for ex in &examples {
            if !seen.insert(ex.id) {
                return Err(DataError::Invariant(format!("duplicate example id {}", ex.id)));
            }
            if ex.label >= num_classes {
                return Err(DataError::Invariant(format!(
                    "example {} has label {} but only {num_classes} classes",
                    ex.id, ex.label
                )));
            }
            if ex.features.len() != shape.flat() {
                return Err(DataError::Shape(format!(
                    "example {} has {} features, expected {}",
                    ex.id,
                    ex.features.len(),
                    shape.flat()
                )));
            }
            if let Some(v) = ex.features.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(DataError::Invariant(format!(
                    "example {} has feature {v} outside [0, 1]",
                    ex.id
                )));
            }
        }
        Ok(Dataset { shape, num_classes, examples })
    }

    pub fn shape(&self) -> InputDims {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Distinct labels present, ascending.
    pub fn class_set(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.examples.iter().map(|e| e.label).collect();
        set.into_iter().collect()
    }
}

/// A dataset with its held-out test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
}

impl SplitDataset {
    pub fn new(train: Dataset, test: Dataset) -> Result<Self> {
        if train.shape != test.shape || train.num_classes != test.num_classes {
            return Err(DataError::Shape("train and test splits disagree on shape or classes".into()));
        }
        let train_ids: HashSet<ExampleId> = train.examples.iter().map(|e| e.id).collect();
        if let Some(e) = test.examples.iter().find(|e| train_ids.contains(&e.id)) {
            return Err(DataError::Invariant(format!("id {} appears in both splits", e.id)));
        }
        Ok(SplitDataset { train, test })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub index: usize,
    /// Global class ids owned by this task, ascending.
    pub classes: Vec<usize>,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSequence {
    shape: InputDims,
    num_classes: usize,
    tasks: Vec<Task>,
}

impl TaskSequence {
    /// Assemble tasks, checking that class sets are disjoint and every
    /// example's label belongs to its task.
    pub fn from_tasks(shape: InputDims, num_classes: usize, tasks: Vec<Task>) -> Result<Self> {
        let mut owner = BTreeMap::new();
        let mut ids = HashSet::new();
        for (t, task) in tasks.iter().enumerate() {
            if task.index != t {
                return Err(DataError::Invariant(format!("task {t} carries index {}", task.index)));
            }
            for &c in &task.classes {
                if c >= num_classes {
                    return Err(DataError::Invariant(format!("class {c} out of range")));
                }
                if let Some(prev) = owner.insert(c, t) {
                    return Err(DataError::Invariant(format!(
                        "class {c} assigned to tasks {prev} and {t}"
                    )));
                }
            }
            for ex in task.train.iter().chain(&task.test) {
                if !task.classes.contains(&ex.label) {
                    return Err(DataError::Invariant(format!(
                        "example {} with label {} routed to task {t}",
                        ex.id, ex.label
                    )));
                }
                if ex.features.len() != shape.flat() {
                    return Err(DataError::Shape(format!("example {} has wrong size", ex.id)));
                }
                if !ids.insert(ex.id) {
                    return Err(DataError::Invariant(format!("duplicate example id {}", ex.id)));
                }
            }
        }
        Ok(TaskSequence { shape, num_classes, tasks })
    }

    pub fn shape(&self) -> InputDims {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Class sets of every task, in task order.
    pub fn class_sets(&self) -> Vec<Vec<usize>> {
        self.tasks.iter().map(|t| t.classes.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassOrder {
    Given,
    Shuffled(u64),
}

/// Partition the classes into `num_tasks` equal groups and route each
/// example to the task owning its label.
pub fn split_into_tasks(data: &SplitDataset, num_tasks: usize, order: ClassOrder) -> Result<TaskSequence> {
    let k = data.train.num_classes;
    if num_tasks == 0 || !k.is_multiple_of(num_tasks) {
        return Err(DataError::Partition { num_classes: k, tasks: num_tasks });
    }
    let mut classes: Vec<usize> = (0..k).collect();
    if let ClassOrder::Shuffled(seed) = order {
        classes.shuffle(&mut seeds::rng(seeds::derive(seed, "class-order")));
    }
    let per = k / num_tasks;
    let mut task_of = vec![0; k];
    let mut tasks: Vec<Task> = classes
        .chunks(per)
        .enumerate()
        .map(|(t, chunk)| {
            let mut cs = chunk.to_vec();
            cs.sort_unstable();
            for &c in &cs {
                task_of[c] = t;
            }
            Task { index: t, classes: cs, train: Vec::new(), test: Vec::new() }
        })
        .collect();
    for ex in data.train.examples() {
        tasks[task_of[ex.label]].train.push(ex.clone());
    }
    for ex in data.test.examples() {
        tasks[task_of[ex.label]].test.push(ex.clone());
    }
    TaskSequence::from_tasks(data.train.shape, k, tasks)
}

/// Stack example features into a batch matrix.
pub fn batch_of<'a, I>(examples: I, width: usize) -> (Matrix, Vec<usize>)
where
    I: IntoIterator<Item = &'a Example>,
{
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for ex in examples {
        data.extend_from_slice(&ex.features);
        labels.push(ex.label);
    }
    let rows = labels.len();
    (Matrix::from_vec(rows, width, data).expect("uniform example width"), labels)
}

/// Synthetic oriented-pattern images.
///
/// Class `c` is a bar, cross or elongated blob (by `c % 3`) at orientation
/// `π·c/num_classes`. Each example gets a difficulty level; levels are graded
/// evenly across a class and shuffled among its examples. Harder examples have
/// lower pattern contrast, more position jitter, stronger pixel noise, and a
/// heavier blend of a distractor pattern taken from another class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapesConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub hw: usize,
    pub seed: u64,
    /// Pixel noise standard deviation at difficulty 0 and 1.
    pub noise: (f64, f64),
    /// Pattern contrast at difficulty 0 and 1.
    pub contrast: (f64, f64),
    /// Maximum position jitter in pixels at difficulty 1.
    pub max_jitter: f64,
    /// Weight of a distractor pattern from another class at difficulty 0 and 1.
    pub distractor: (f64, f64),
    /// Difficulty levels are `u^power` for evenly spaced `u` in (0, 1); powers
    /// above 1 skew a class toward easy examples.
    pub difficulty_power: f64,
    /// Spatial variants per class; variant 0 is centred, the others are
    /// displaced by `mode_shift` pixels in evenly spaced directions.
    pub modes: usize,
    /// Variant `m` is drawn with weight `mode_decay^m`, so later variants are rarer.
    pub mode_decay: f64,
    pub mode_shift: f64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            num_classes: 8,
            train_per_class: 200,
            test_per_class: 100,
            hw: 8,
            seed: 0,
            noise: (0.05, 0.3),
            contrast: (0.9, 0.4),
            max_jitter: 1.5,
            distractor: (0.0, 0.75),
            difficulty_power: 1.25,
            modes: 4,
            mode_decay: 0.5,
            mode_shift: 2.0,
        }
    }
}

impl ShapesConfig {
    pub fn new(num_classes: usize, per_class: usize, hw: usize, seed: u64) -> Self {
        ShapesConfig {
            num_classes,
            train_per_class: per_class,
            test_per_class: per_class,
            hw,
            seed,
            ..ShapesConfig::default()
        }
    }
}

fn render_pattern(class: usize, num_classes: usize, hw: usize, dx: f64, dy: f64) -> Vec<f64> {
    let theta = std::f64::consts::PI * class as f64 / num_classes as f64;
    let (s, c) = theta.sin_cos();
    let n = hw as f64;
    let cx = (n - 1.0) / 2.0 + dx;
    let cy = (n - 1.0) / 2.0 + dy;
    let width = 0.09 * n;
    let half_len = 0.4 * n;
    let bar = |x: f64, y: f64, s: f64, c: f64| {
        let along = (x - cx) * c + (y - cy) * s;
        let across = -(x - cx) * s + (y - cy) * c;
        let fall = if along.abs() > half_len { (-(along.abs() - half_len).powi(2) / 0.5).exp() } else { 1.0 };
        (-across * across / (2.0 * width * width)).exp() * fall
    };
    let mut img = Vec::with_capacity(hw * hw);
    for row in 0..hw {
        for col in 0..hw {
            let (x, y) = (col as f64, row as f64);
            let v = match class % 3 {
                0 => bar(x, y, s, c),
                1 => bar(x, y, s, c).max(bar(x, y, c, -s)),
                _ => {
                    let along = (x - cx) * c + (y - cy) * s;
                    let across = -(x - cx) * s + (y - cy) * c;
                    let (sa, sc) = (0.28 * n, 0.14 * n);
                    (-(along * along) / (2.0 * sa * sa) - (across * across) / (2.0 * sc * sc)).exp()
                }
            };
            img.push(v);
        }
    }
    img
}

fn mode_offset(mode: usize, cfg: &ShapesConfig, class: usize) -> (f64, f64) {
    if mode == 0 {
        return (0.0, 0.0);
    }
    let turn = (mode - 1) as f64 / (cfg.modes - 1) as f64 + class as f64 / (2 * cfg.num_classes) as f64;
    let (s, c) = (std::f64::consts::TAU * turn).sin_cos();
    (cfg.mode_shift * c, cfg.mode_shift * s)
}

fn generate_split(cfg: &ShapesConfig, per_class: usize, first_id: u64, tag: &str) -> Result<Dataset> {
    let mut rng = seeds::rng(seeds::derive(cfg.seed, tag));
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let n = cfg.num_classes * per_class;
    let mut levels: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| {
            let mut l: Vec<f64> = (0..per_class)
                .map(|k| ((k as f64 + 0.5) / per_class as f64).powf(cfg.difficulty_power))
                .collect();
            l.shuffle(&mut rng);
            l
        })
        .collect();
    let weights: Vec<f64> = (0..cfg.modes).map(|m| cfg.mode_decay.powi(m as i32)).collect();
    let total: f64 = weights.iter().sum();
    let mut modes: Vec<Vec<usize>> = (0..cfg.num_classes)
        .map(|_| {
            let mut m: Vec<usize> = (0..per_class)
                .map(|k| {
                    let target = (k as f64 + 0.5) / per_class as f64 * total;
                    let mut acc = 0.0;
                    weights.iter().position(|w| {
                        acc += w;
                        acc > target
                    })
                    .unwrap_or(cfg.modes - 1)
                })
                .collect();
            m.shuffle(&mut rng);
            m
        })
        .collect();
    let lerp = |(a, b): (f64, f64), t: f64| a + (b - a) * t;
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % cfg.num_classes;
        let difficulty = levels[label].pop().expect("per-class level available");
        let jitter = 0.5 + (cfg.max_jitter - 0.5).max(0.0) * difficulty;
        let (ox, oy) = mode_offset(modes[label].pop().expect("per-class mode available"), cfg, label);
        let dx = ox + rng.random_range(-jitter..=jitter);
        let dy = oy + rng.random_range(-jitter..=jitter);
        let contrast = lerp(cfg.contrast, difficulty);
        let sigma = lerp(cfg.noise, difficulty);
        let base = 0.5 - contrast / 2.0;
        let mix = lerp(cfg.distractor, difficulty);
        let other = (label + rng.random_range(1..cfg.num_classes)) % cfg.num_classes;
        let own = render_pattern(label, cfg.num_classes, cfg.hw, dx, dy);
        let distractor = render_pattern(other, cfg.num_classes, cfg.hw, dx, dy);
        let features = own
            .into_iter()
            .zip(distractor)
            .map(|(p, d)| {
                let p = (1.0 - mix) * p + mix * d;
                (base + contrast * p + sigma * unit.sample(&mut rng)).clamp(0.0, 1.0)
            })
            .collect();
        examples.push(Example { id: first_id + i as u64, features, label });
    }
    Dataset::new(InputDims { height: cfg.hw, width: cfg.hw, channels: 1 }, cfg.num_classes, examples)
}

/// Generate train and test splits. Train ids are `0..num_classes·train_per_class`;
/// test ids continue after them. Labels cycle through classes so every prefix
/// is near-balanced.
pub fn generate_shapes(cfg: &ShapesConfig) -> Result<SplitDataset> {
    if cfg.hw < 8 {
        return Err(DataError::Config(format!("image size {} below minimum of 8", cfg.hw)));
    }
    if cfg.num_classes < 2 {
        return Err(DataError::Config("need at least 2 classes".into()));
    }
    if cfg.modes == 0 || !(cfg.mode_decay > 0.0 && cfg.mode_decay <= 1.0) {
        return Err(DataError::Config("need at least one mode and a mode decay in (0, 1]".into()));
    }
    if cfg.train_per_class == 0 {
        return Err(DataError::Config("need at least one training example per class".into()));
    }
    let train = generate_split(cfg, cfg.train_per_class, 0, "shapes-train")?;
    let first_test = train.len() as u64;
    let test = generate_split(cfg, cfg.test_per_class, first_test, "shapes-test")?;
    SplitDataset::new(train, test)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RotationMode {
    /// 0°, 90°, 180°, 270°, labels 0..4.
    FourWay,
    /// 90°, 180°, 270°, labels 0..3.
    ThreeWay,
}

/// Rotate a row-major H x W x C image counter-clockwise by `quarter_turns · 90°`.
pub fn rotate_image(pixels: &[f64], side: usize, channels: usize, quarter_turns: usize) -> Vec<f64> {
    let mut cur = pixels.to_vec();
    for _ in 0..quarter_turns % 4 {
        let mut next = vec![0.0; cur.len()];
        for r in 0..side {
            for c in 0..side {
                let src = (c * side + (side - 1 - r)) * channels;
                let dst = (r * side + c) * channels;
                next[dst..dst + channels].copy_from_slice(&cur[src..src + channels]);
            }
        }
        cur = next;
    }
    cur
}

/// Replace every image with a rotated copy and every label with the index of
/// the rotation applied. Ids are preserved.
pub fn rotation_task(data: &Dataset, mode: RotationMode, seed: u64) -> Result<Dataset> {
    let s = data.shape;
    if s.height != s.width {
        return Err(DataError::Shape(format!("rotation needs square images, got {}x{}", s.height, s.width)));
    }
    let (turns, classes): (&[usize], usize) = match mode {
        RotationMode::FourWay => (&[0, 1, 2, 3], 4),
        RotationMode::ThreeWay => (&[1, 2, 3], 3),
    };
    let mut rng = seeds::rng(seeds::derive(seed, "rotation"));
    let examples = data
        .examples
        .iter()
        .map(|ex| {
            let label = rng.random_range(0..turns.len());
            Example {
                id: ex.id,
                features: rotate_image(&ex.features, s.height, s.channels, turns[label]),
                label,
            }
        })
        .collect();
    Dataset::new(s, classes, examples)
}

/// Redraw every label uniformly over the dataset's present class set.
pub fn randomize_labels(data: &Dataset, seed: u64) -> Dataset {
    let classes = data.class_set();
    let mut rng = seeds::rng(seeds::derive(seed, "random-labels"));
    let examples = data
        .examples
        .iter()
        .map(|ex| Example {
            label: classes[rng.random_range(0..classes.len())],
            ..ex.clone()
        })
        .collect();
    Dataset { shape: data.shape, num_classes: data.num_classes, examples }
}

/// Write a dataset in the canonical CSV layout.
pub fn write_csv_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let io_err = |source| DataError::Io { path: path.display().to_string(), source };
    let s = data.shape;
    let mut out = String::new();
    let _ = writeln!(out, "# shape={},{},{} classes={}", s.height, s.width, s.channels, data.num_classes);
    out.push_str("id,label");
    for i in 0..s.flat() {
        let _ = write!(out, ",f{i}");
    }
    out.push('\n');
    for ex in &data.examples {
        let _ = write!(out, "{},{}", ex.id, ex.label);
        for v in &ex.features {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(out.as_bytes()).map_err(io_err)
}

fn parse_meta(line: &str) -> Option<(InputDims, usize)> {
    let rest = line.strip_prefix('#')?.trim();
    let mut shape = None;
    let mut classes = None;
    for tok in rest.split_whitespace() {
        if let Some(v) = tok.strip_prefix("shape=") {
            let dims: Vec<usize> = v.split(',').map(str::parse).collect::<std::result::Result<_, _>>().ok()?;
            if let [h, w, c] = dims[..] {
                shape = Some(InputDims { height: h, width: w, channels: c });
            }
        } else if let Some(v) = tok.strip_prefix("classes=") {
            classes = v.parse().ok();
        }
    }
    Some((shape?, classes?))
}

/// Load a dataset from the canonical CSV layout.
pub fn load_csv_dataset(path: &Path) -> Result<Dataset> {
    let p = path.display().to_string();
    let parse = |line: usize, msg: String| DataError::Parse { path: p.clone(), line, msg };
    let file = std::fs::File::open(path).map_err(|source| DataError::Io { path: p.clone(), source })?;
    let mut lines = BufReader::new(file).lines().enumerate().map(|(i, l)| (i + 1, l));
    let next = |lines: &mut dyn Iterator<Item = (usize, std::io::Result<String>)>| -> Result<Option<(usize, String)>> {
        match lines.next() {
            None => Ok(None),
            Some((n, Ok(l))) => Ok(Some((n, l))),
            Some((_, Err(source))) => Err(DataError::Io { path: p.clone(), source }),
        }
    };

    let (n, meta) = next(&mut lines)?.ok_or_else(|| parse(1, "empty file".into()))?;
    let (shape, num_classes) =
        parse_meta(&meta).ok_or_else(|| parse(n, "expected `# shape=H,W,C classes=K`".into()))?;
    let width = shape.flat();
    let (n, header) = next(&mut lines)?.ok_or_else(|| parse(2, "missing column header".into()))?;
    let cols: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    let expected: Vec<String> = ["id".to_string(), "label".to_string()]
        .into_iter()
        .chain((0..width).map(|i| format!("f{i}")))
        .collect();
    if cols != expected {
        return Err(parse(n, format!("column header must be id,label,f0..f{}", width.saturating_sub(1))));
    }

    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    while let Some((n, line)) = next(&mut lines)? {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width + 2 {
            return Err(parse(n, format!("expected {} columns, found {}", width + 2, cells.len())));
        }
        let id: ExampleId = cells[0].trim().parse().map_err(|_| parse(n, format!("bad id `{}`", cells[0])))?;
        let label: usize =
            cells[1].trim().parse().map_err(|_| parse(n, format!("bad label `{}`", cells[1])))?;
        if label >= num_classes {
            return Err(parse(n, format!("label {label} not below declared {num_classes} classes")));
        }
        if !seen.insert(id) {
            return Err(parse(n, format!("duplicate id {id}")));
        }
        let features = cells[2..]
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let v: f64 = c.trim().parse().map_err(|_| parse(n, format!("non-numeric f{j} `{c}`")))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(parse(n, format!("f{j}={v} outside [0, 1]")));
                }
                Ok(v)
            })
            .collect::<Result<Vec<f64>>>()?;
        examples.push(Example { id, features, label });
    }
    Dataset::new(shape, num_classes, examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SplitDataset {
        generate_shapes(&ShapesConfig::new(10, 6, 8, 4)).unwrap()
    }

    #[test]
    fn given_order_pairs_consecutive_classes() {
        let seq = split_into_tasks(&small(), 5, ClassOrder::Given).unwrap();
        let sets = seq.class_sets();
        assert_eq!(sets, vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7], vec![8, 9]]);
        for task in seq.tasks() {
            assert!(task.train.iter().chain(&task.test).all(|e| task.classes.contains(&e.label)));
        }
    }

    #[test]
    fn single_task_holds_everything() {
        let data = small();
        let seq = split_into_tasks(&data, 1, ClassOrder::Given).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq.tasks()[0].train.len(), data.train.len());
        assert_eq!(seq.tasks()[0].test.len(), data.test.len());
    }

    #[test]
    fn shuffled_split_is_seeded() {
        let data = small();
        let a = split_into_tasks(&data, 5, ClassOrder::Shuffled(3)).unwrap();
        let b = split_into_tasks(&data, 5, ClassOrder::Shuffled(3)).unwrap();
        assert_eq!(a.class_sets(), b.class_sets());
        let mut all: Vec<usize> = a.class_sets().concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn indivisible_split_rejected() {
        assert!(matches!(
            split_into_tasks(&small(), 3, ClassOrder::Given),
            Err(DataError::Partition { num_classes: 10, tasks: 3 })
        ));
    }

    #[test]
    fn generator_counts_and_range() {
        let d = generate_shapes(&ShapesConfig::new(4, 100, 8, 1)).unwrap();
        assert_eq!(d.train.len(), 400);
        let ids: Vec<u64> = d.train.examples().iter().map(|e| e.id).collect();
        assert_eq!(ids, (0..400).collect::<Vec<_>>());
        for c in 0..4 {
            assert_eq!(d.train.examples().iter().filter(|e| e.label == c).count(), 100);
        }
        assert!(d.train.examples().iter().all(|e| e.features.iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(d.test.examples().iter().all(|e| e.id >= 400));
        assert_eq!(d, generate_shapes(&ShapesConfig::new(4, 100, 8, 1)).unwrap());
    }

    #[test]
    fn generator_rejects_tiny_images() {
        assert!(matches!(generate_shapes(&ShapesConfig::new(4, 10, 7, 1)), Err(DataError::Config(_))));
        assert!(matches!(generate_shapes(&ShapesConfig::new(1, 10, 8, 1)), Err(DataError::Config(_))));
    }

    #[test]
    fn rotation_of_three_by_three() {
        let img: Vec<f64> = (1..=9).map(f64::from).collect();
        // Counter-clockwise quarter turn.
        let want = vec![3.0, 6.0, 9.0, 2.0, 5.0, 8.0, 1.0, 4.0, 7.0];
        assert_eq!(rotate_image(&img, 3, 1, 1), want);
        assert_eq!(rotate_image(&img, 3, 1, 0), img);
        assert_eq!(rotate_image(&img, 3, 1, 4), img);
        assert_eq!(rotate_image(&rotate_image(&img, 3, 1, 1), 3, 1, 3), img);
    }

    #[test]
    fn rotation_task_labels_and_ids() {
        let d = small().train;
        let r = rotation_task(&d, RotationMode::FourWay, 2).unwrap();
        assert_eq!(r.num_classes(), 4);
        assert_eq!(r.len(), d.len());
        assert!(r.examples().iter().zip(d.examples()).all(|(a, b)| a.id == b.id && a.label < 4));
        for (a, b) in r.examples().iter().zip(d.examples()) {
            if a.label == 0 {
                assert_eq!(a.features, b.features);
            }
        }
        let t = rotation_task(&d, RotationMode::ThreeWay, 2).unwrap();
        assert_eq!(t.class_set(), vec![0, 1, 2]);
    }

    #[test]
    fn rotation_needs_square() {
        let shape = InputDims { height: 2, width: 3, channels: 1 };
        let d = Dataset::new(shape, 2, vec![Example { id: 0, features: vec![0.0; 6], label: 0 }]).unwrap();
        assert!(matches!(rotation_task(&d, RotationMode::FourWay, 0), Err(DataError::Shape(_))));
    }

    #[test]
    fn random_labels_single_class_unchanged() {
        let shape = InputDims { height: 1, width: 1, channels: 1 };
        let ex: Vec<Example> = (0..20).map(|i| Example { id: i, features: vec![0.5], label: 0 }).collect();
        let d = Dataset::new(shape, 1, ex).unwrap();
        assert_eq!(randomize_labels(&d, 9), d);
    }

    #[test]
    fn csv_duplicate_id_names_second_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "# shape=1,2,1 classes=2\nid,label,f0,f1\n5,0,0.1,0.2\n5,1,0.3,0.4\n").unwrap();
        match load_csv_dataset(&p) {
            Err(DataError::Parse { line, msg, .. }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("duplicate"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let cases = [
            ("# shape=1,2,1 classes=2\nid,label,f0\n", 2),
            ("# shape=1,2,1 classes=2\nid,label,f0,f1\n1,0,0.1,x\n", 3),
            ("# shape=1,2,1 classes=2\nid,label,f0,f1\n1,2,0.1,0.2\n", 3),
            ("# shape=1,2,1 classes=2\nid,label,f0,f1\n1,0,0.1\n", 3),
            ("shape=1,2,1\n", 1),
        ];
        for (text, want_line) in cases {
            std::fs::write(&p, text).unwrap();
            match load_csv_dataset(&p) {
                Err(DataError::Parse { line, .. }) => assert_eq!(line, want_line, "{text}"),
                other => panic!("unexpected {other:?} for {text}"),
            }
        }
        assert!(matches!(load_csv_dataset(&dir.path().join("missing.csv")), Err(DataError::Io { .. })));
    }

    #[test]
    fn csv_reads_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "# shape=1,1,1 classes=3\nid,label,f0\n9,2,1\n3,0,0\n4,1,0.5\n").unwrap();
        let d = load_csv_dataset(&p).unwrap();
        let ids: Vec<u64> = d.examples().iter().map(|e| e.id).collect();
        assert_eq!(ids, vec![9, 3, 4]);
        assert_eq!(d.examples()[2].features, vec![0.5]);
    }
}
