//! Replay-buffer selection strategies.
//!
//! Every strategy returns a [`Selection`]: distinct ids drawn from the input
//! pool, sorted ascending, of size `min(n, available)`. When fewer candidates
//! survive filtering than the budget asks for, the whole candidate set is
//! returned and `shortfall` is set. Ties between equal scores always resolve
//! to the smaller example id.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{batch_of, Example, ExampleId};
use crate::seeds;
use crate::speed::SpeedReport;
use crate::tensor::{argmax, cross_entropy, softmax, InputDims, Network, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("example {0} has no score")]
    MissingScore(ExampleId),
    #[error("class {0} has no examples to select from")]
    EmptyClass(usize),
    #[error("example {id}: {msg}")]
    InvalidDistribution { id: ExampleId, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, SamplerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Uniform,
    Reservoir,
    Sbs,
    Threshold,
    Herding,
    MaxEntropy,
    Loss,
    Uncertainty,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 8] = [
        SamplerKind::Uniform,
        SamplerKind::Reservoir,
        SamplerKind::Sbs,
        SamplerKind::Threshold,
        SamplerKind::Herding,
        SamplerKind::MaxEntropy,
        SamplerKind::Loss,
        SamplerKind::Uncertainty,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Uniform => "uniform",
            SamplerKind::Reservoir => "reservoir",
            SamplerKind::Sbs => "sbs",
            SamplerKind::Threshold => "threshold",
            SamplerKind::Herding => "herding",
            SamplerKind::MaxEntropy => "max_entropy",
            SamplerKind::Loss => "loss",
            SamplerKind::Uncertainty => "uncertainty",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        SamplerKind::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn uses_speeds(self) -> bool {
        matches!(self, SamplerKind::Sbs | SamplerKind::Threshold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossDirection {
    Highest,
    Lowest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Fraction of quickest-learned examples removed.
    pub q: f64,
    /// Fraction of slowest-learned examples removed.
    pub s: f64,
    pub k_augment: usize,
    pub loss_direction: LossDirection,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            kind: SamplerKind::Uniform,
            q: 0.0,
            s: 0.0,
            k_augment: 4,
            loss_direction: LossDirection::Highest,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn uniform() -> Self {
        SamplerConfig::default()
    }

    pub fn sbs(q: f64, s: f64) -> Self {
        SamplerConfig { kind: SamplerKind::Sbs, q, s, ..SamplerConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.uses_speeds() {
            check_fractions(self.q, self.s)?;
        }
        if self.kind == SamplerKind::Uncertainty && self.k_augment < 2 {
            return Err(SamplerError::Config(format!("k_augment must be at least 2, got {}", self.k_augment)));
        }
        Ok(())
    }
}

fn check_fractions(q: f64, s: f64) -> Result<()> {
    if !(0.0..1.0).contains(&q) || !(0.0..1.0).contains(&s) {
        return Err(SamplerError::Config(format!("q={q} and s={s} must lie in [0, 1)")));
    }
    if q + s >= 1.0 {
        return Err(SamplerError::Config(format!("q + s = {} must be below 1", q + s)));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    LearningSpeed,
    Entropy,
    Loss,
    Uncertainty,
    Feature,
}

/// One finite score per candidate id.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPool {
    pub scores: BTreeMap<ExampleId, f64>,
    pub kind: ScoreKind,
}

impl ScoredPool {
    pub fn new(scores: BTreeMap<ExampleId, f64>, kind: ScoreKind) -> Result<Self> {
        if let Some((id, v)) = scores.iter().find(|(_, v)| !v.is_finite()) {
            return Err(SamplerError::InvalidDistribution { id: *id, msg: format!("non-finite score {v}") });
        }
        Ok(ScoredPool { scores, kind })
    }

    /// Ids ranked by score (descending when `highest_first`), ties by ascending id.
    pub fn ranked(&self, highest_first: bool) -> Vec<ExampleId> {
        let mut v: Vec<(ExampleId, f64)> = self.scores.iter().map(|(&i, &s)| (i, s)).collect();
        v.sort_by(|a, b| {
            let ord = a.1.total_cmp(&b.1);
            let ord = if highest_first { ord.reverse() } else { ord };
            ord.then(a.0.cmp(&b.0))
        });
        v.into_iter().map(|(i, _)| i).collect()
    }

    pub fn top(&self, n: usize, highest_first: bool) -> Selection {
        let ranked = self.ranked(highest_first);
        let shortfall = n > ranked.len();
        Selection::new(ranked.into_iter().take(n).collect(), shortfall)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub ids: Vec<ExampleId>,
    /// Fewer candidates than requested were available.
    pub shortfall: bool,
}

impl Selection {
    fn new(mut ids: Vec<ExampleId>, shortfall: bool) -> Self {
        ids.sort_unstable();
        Selection { ids, shortfall }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Rank the pool by speed (fastest first, ties by id) and drop the first
/// `floor(q·n)` and the last `floor(s·n)`. The survivors keep rank order.
pub fn sbs_filter(pool: &[ExampleId], speeds: &SpeedReport, q: f64, s: f64) -> Result<Vec<ExampleId>> {
    check_fractions(q, s)?;
    let mut ranked: Vec<(ExampleId, f64)> = pool
        .iter()
        .map(|&id| speeds.get(id).map(|v| (id, v)).ok_or(SamplerError::MissingScore(id)))
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let n = ranked.len();
    let drop_quick = (q * n as f64).floor() as usize;
    let drop_slow = (s * n as f64).floor() as usize;
    Ok(ranked[drop_quick..n - drop_slow].iter().map(|&(id, _)| id).collect())
}

/// Seeded uniform sample without replacement. The result depends only on the
/// candidate set, not its order.
pub fn uniform_sample(pool: &[ExampleId], n: usize, seed: u64) -> Selection {
    let mut candidates = pool.to_vec();
    candidates.sort_unstable();
    candidates.dedup();
    if n >= candidates.len() {
        let shortfall = n > candidates.len();
        return Selection::new(candidates, shortfall);
    }
    let mut rng = seeds::rng(seed);
    let picked = rand::seq::index::sample(&mut rng, candidates.len(), n)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    Selection::new(picked, false)
}

/// Speed-based sampling: filter with [`sbs_filter`] then sample uniformly.
pub fn sbs_sample(
    pool: &[ExampleId],
    speeds: &SpeedReport,
    q: f64,
    s: f64,
    n: usize,
    seed: u64,
) -> Result<Selection> {
    let kept = sbs_filter(pool, speeds, q, s)?;
    Ok(uniform_sample(&kept, n, seed))
}

/// Buffer composition by percentile cuts on learning speed; same semantics as
/// [`sbs_sample`] with `(q, s) = (quick_cut, slow_cut)`.
pub fn threshold_compose(
    pool: &[ExampleId],
    speeds: &SpeedReport,
    quick_cut: f64,
    slow_cut: f64,
    n: usize,
    seed: u64,
) -> Result<Selection> {
    sbs_sample(pool, speeds, quick_cut, slow_cut, n, seed)
}

/// Classic reservoir step. `seen_count` counts items observed so far
/// including `item`. Returns whether `item` entered the buffer.
pub fn reservoir_update<T, R: Rng + ?Sized>(
    buffer: &mut Vec<T>,
    item: T,
    seen_count: u64,
    capacity: usize,
    rng: &mut R,
) -> bool {
    if capacity == 0 {
        return false;
    }
    if buffer.len() < capacity {
        buffer.push(item);
        return true;
    }
    let j = rng.random_range(0..seen_count.max(1));
    if j < capacity as u64 {
        buffer[j as usize] = item;
        true
    } else {
        false
    }
}

/// Stream the pool (ascending id order) through a size-`n` reservoir.
pub fn reservoir_sample(pool: &[ExampleId], n: usize, seed: u64) -> Selection {
    let mut candidates = pool.to_vec();
    candidates.sort_unstable();
    candidates.dedup();
    let shortfall = n > candidates.len();
    let mut rng = seeds::rng(seed);
    let mut buf = Vec::with_capacity(n);
    for (i, id) in candidates.into_iter().enumerate() {
        reservoir_update(&mut buf, id, i as u64 + 1, n, &mut rng);
    }
    Selection::new(buf, shortfall)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy herding per class. The budget is split round-robin over `classes`
/// (ascending), so remainders go to the lowest class ids and classes that run
/// out of examples pass their share on.
pub fn herding_select(
    features: &BTreeMap<ExampleId, Vec<f64>>,
    labels: &BTreeMap<ExampleId, usize>,
    classes: &[usize],
    n: usize,
) -> Result<Selection> {
    let mut by_class: BTreeMap<usize, Vec<ExampleId>> = classes.iter().map(|&c| (c, Vec::new())).collect();
    for (&id, &label) in labels {
        if !features.contains_key(&id) {
            return Err(SamplerError::MissingScore(id));
        }
        if let Some(v) = by_class.get_mut(&label) {
            v.push(id);
        }
    }
    if let Some((&c, _)) = by_class.iter().find(|(_, v)| v.is_empty()) {
        return Err(SamplerError::EmptyClass(c));
    }

    let mut budget: BTreeMap<usize, usize> = by_class.keys().map(|&c| (c, 0)).collect();
    let mut left = n;
    while left > 0 {
        let mut gave = false;
        for (c, members) in &by_class {
            if left == 0 {
                break;
            }
            let b = budget.get_mut(c).expect("class present");
            if *b < members.len() {
                *b += 1;
                left -= 1;
                gave = true;
            }
        }
        if !gave {
            break;
        }
    }

    let mut picked = Vec::with_capacity(n);
    for (c, members) in &by_class {
        let dim = features[&members[0]].len();
        let mut mean = vec![0.0; dim];
        for id in members {
            for (m, v) in mean.iter_mut().zip(&features[id]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= members.len() as f64);

        let mut sum = vec![0.0; dim];
        let mut chosen: BTreeSet<ExampleId> = BTreeSet::new();
        for k in 0..budget[c] {
            let mut best: Option<(ExampleId, f64)> = None;
            // members are in ascending id order, so strict `<` keeps the lowest id on ties
            for id in members.iter().filter(|id| !chosen.contains(id)) {
                let cand: Vec<f64> =
                    sum.iter().zip(&features[id]).map(|(s, x)| (s + x) / (k + 1) as f64).collect();
                let d = sq_dist(&cand, &mean);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((*id, d));
                }
            }
            let (id, _) = best.expect("budget never exceeds class size");
            for (s, x) in sum.iter_mut().zip(&features[&id]) {
                *s += x;
            }
            chosen.insert(id);
            picked.push(id);
        }
    }
    let shortfall = n > picked.len();
    Ok(Selection::new(picked, shortfall))
}

/// Shannon entropy in nats, with `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

pub fn max_entropy_select(probs: &BTreeMap<ExampleId, Vec<f64>>, n: usize) -> Result<Selection> {
    let mut scores = BTreeMap::new();
    for (&id, p) in probs {
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SamplerError::InvalidDistribution { id, msg: "probabilities must be finite and nonnegative".into() });
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(SamplerError::InvalidDistribution { id, msg: format!("probabilities sum to {total}") });
        }
        scores.insert(id, entropy(p));
    }
    Ok(ScoredPool::new(scores, ScoreKind::Entropy)?.top(n, true))
}

pub fn loss_select(losses: &BTreeMap<ExampleId, f64>, n: usize, direction: LossDirection) -> Result<Selection> {
    let pool = ScoredPool::new(losses.clone(), ScoreKind::Loss)?;
    Ok(pool.top(n, direction == LossDirection::Highest))
}

/// One augmentation: optional horizontal flip followed by a shift with edge
/// replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augment {
    pub flip: bool,
    pub dx: i64,
    pub dy: i64,
}

impl Augment {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Augment { flip: rng.random_bool(0.5), dx: rng.random_range(-1..=1), dy: rng.random_range(-1..=1) }
    }

    pub fn apply(&self, pixels: &[f64], shape: InputDims) -> Vec<f64> {
        let (h, w, ch) = (shape.height as i64, shape.width as i64, shape.channels);
        let mut out = Vec::with_capacity(pixels.len());
        for r in 0..h {
            for c in 0..w {
                let sr = (r - self.dy).clamp(0, h - 1);
                let mut sc = (c - self.dx).clamp(0, w - 1);
                if self.flip {
                    sc = w - 1 - sc;
                }
                let at = ((sr * w + sc) as usize) * ch;
                out.extend_from_slice(&pixels[at..at + ch]);
            }
        }
        out
    }
}

/// `1 − (share of k augmented copies agreeing with the modal prediction)`.
/// Each example's augmentations come from a stream keyed by its id.
pub fn augmentation_scores(
    net: &Network,
    pool: &[Example],
    k_augment: usize,
    seed: u64,
) -> Result<BTreeMap<ExampleId, f64>> {
    let shape = net.spec().input_dims;
    let width = shape.flat();
    let mut scores = BTreeMap::new();
    for ex in pool {
        let mut rng = seeds::rng(seeds::derive_indexed(seed, "augment", ex.id));
        let copies: Vec<Example> = (0..k_augment)
            .map(|_| Example { id: ex.id, features: Augment::random(&mut rng).apply(&ex.features, shape), label: ex.label })
            .collect();
        let (batch, _) = batch_of(&copies, width);
        let logits = net.forward(&batch)?;
        let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
        for i in 0..logits.rows() {
            *votes.entry(argmax(logits.row(i))).or_default() += 1;
        }
        let modal = votes.values().copied().max().unwrap_or(0);
        scores.insert(ex.id, 1.0 - modal as f64 / k_augment as f64);
    }
    Ok(scores)
}

pub fn uncertainty_select(
    net: &Network,
    pool: &[Example],
    k_augment: usize,
    n: usize,
    seed: u64,
) -> Result<Selection> {
    if k_augment < 2 {
        return Err(SamplerError::Config(format!("k_augment must be at least 2, got {k_augment}")));
    }
    let scores = augmentation_scores(net, pool, k_augment, seed)?;
    Ok(ScoredPool::new(scores, ScoreKind::Uncertainty)?.top(n, true))
}

/// Everything a sampler may need about the pool it selects from.
pub struct SelectionInput<'a> {
    pub pool: &'a [Example],
    /// Global class ids of the pool's task, ascending.
    pub classes: &'a [usize],
    pub speeds: Option<&'a SpeedReport>,
    pub net: &'a Network,
}

/// Dispatch to the configured strategy.
pub fn select(cfg: &SamplerConfig, input: &SelectionInput<'_>, n: usize, seed: u64) -> Result<Selection> {
    cfg.validate()?;
    let ids: Vec<ExampleId> = input.pool.iter().map(|e| e.id).collect();
    let width = input.net.spec().input_dims.flat();
    let need_speeds = || input.speeds.ok_or_else(|| SamplerError::Config("sampler needs learning speeds".into()));
    match cfg.kind {
        SamplerKind::Uniform => Ok(uniform_sample(&ids, n, seed)),
        SamplerKind::Reservoir => Ok(reservoir_sample(&ids, n, seed)),
        SamplerKind::Sbs => sbs_sample(&ids, need_speeds()?, cfg.q, cfg.s, n, seed),
        SamplerKind::Threshold => threshold_compose(&ids, need_speeds()?, cfg.q, cfg.s, n, seed),
        SamplerKind::Herding => {
            let (batch, _) = batch_of(input.pool, width);
            let feats = input.net.penultimate(&batch)?;
            let features = ids.iter().enumerate().map(|(i, &id)| (id, feats.row(i).to_vec())).collect();
            let labels = input.pool.iter().map(|e| (e.id, e.label)).collect();
            herding_select(&features, &labels, input.classes, n)
        }
        SamplerKind::MaxEntropy => {
            let (batch, _) = batch_of(input.pool, width);
            let logits = input.net.forward(&batch)?;
            let probs = ids
                .iter()
                .enumerate()
                .map(|(i, &id)| {
                    let row = logits.row(i);
                    let task_logits: Vec<f64> = input.classes.iter().map(|&c| row[c]).collect();
                    (id, softmax(&task_logits))
                })
                .collect();
            max_entropy_select(&probs, n)
        }
        SamplerKind::Loss => {
            let (batch, labels) = batch_of(input.pool, width);
            let logits = input.net.forward(&batch)?;
            let losses = cross_entropy(&logits, &labels)?;
            loss_select(&ids.iter().copied().zip(losses).collect(), n, cfg.loss_direction)
        }
        SamplerKind::Uncertainty => uncertainty_select(input.net, input.pool, cfg.k_augment, n, seed),
    }
}
