//! Statistics over finished runs: speed versus remembering, buffer size
//! versus remembered speed, and (q, s) composition sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ExampleId;
use crate::engine::{run_experiment, RunConfig, Tracking};
use crate::exec::Execution;
use crate::samplers::SamplerConfig;
use crate::seeds;
use crate::speed::SpeedReport;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error("invalid analysis input: {0}")]
    Config(String),
    #[error("no run succeeded: {0}")]
    AllRunsFailed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(AnalysisError::Config(format!("length mismatch: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(AnalysisError::UndefinedCorrelation(format!("{} points, need at least 3", xs.len())));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub r: f64,
    pub n: usize,
    pub points: Vec<(f64, f64)>,
}

impl CorrelationReport {
    pub fn from_points(points: Vec<(f64, f64)>) -> Result<Self> {
        let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
        let r = pearson(&xs, &ys)?;
        Ok(CorrelationReport { r, n: points.len(), points })
    }
}

/// One bin of the remember-% axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveBin {
    pub lo: f64,
    pub hi: f64,
    pub mean_speed: f64,
    pub mean_remembered: f64,
    pub n_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RememberCurve {
    pub bins: Vec<CurveBin>,
    /// x = mean learning speed of a bin, y = its mean fraction of seeds remembering.
    pub correlation: CorrelationReport,
}

impl RememberCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,mean_speed,n_examples\n");
        for b in &self.bins {
            let _ = writeln!(out, "{},{},{},{}", b.lo, b.hi, b.mean_speed, b.n_examples);
        }
        out
    }
}

pub const DEFAULT_BINS: usize = 10;

/// Group examples by the fraction of seeds that remembered them and correlate
/// each group's mean learning speed with that fraction.
///
/// `speeds[i]` and `remembered[i]` come from seed `i`; every report must cover
/// the same examples. Bins are `[k/n, (k+1)/n)` with the last one closed;
/// empty bins are dropped.
pub fn speed_vs_remember_curve(
    speeds: &[SpeedReport],
    remembered: &[BTreeSet<ExampleId>],
    n_bins: usize,
) -> Result<RememberCurve> {
    if speeds.len() != remembered.len() {
        return Err(AnalysisError::Config("one remembered set per speed report".into()));
    }
    if speeds.len() < 2 {
        return Err(AnalysisError::Config("need at least 2 seeds".into()));
    }
    if n_bins == 0 {
        return Err(AnalysisError::Config("n_bins must be positive".into()));
    }
    let ids: Vec<ExampleId> = speeds[0].speeds.keys().copied().collect();
    if speeds.iter().any(|s| s.speeds.len() != ids.len() || !ids.iter().all(|id| s.speeds.contains_key(id))) {
        return Err(AnalysisError::Config("speed reports cover different examples".into()));
    }
    let seeds = speeds.len() as f64;
    let mut acc = vec![(0.0, 0.0, 0usize); n_bins];
    for id in &ids {
        let speed = speeds.iter().map(|s| s.speeds[id]).sum::<f64>() / seeds;
        let frac = remembered.iter().filter(|r| r.contains(id)).count() as f64 / seeds;
        let bin = ((frac * n_bins as f64).floor() as usize).min(n_bins - 1);
        acc[bin].0 += speed;
        acc[bin].1 += frac;
        acc[bin].2 += 1;
    }
    let bins: Vec<CurveBin> = acc
        .into_iter()
        .enumerate()
        .filter(|(_, a)| a.2 > 0)
        .map(|(k, (speed, frac, n))| CurveBin {
            lo: k as f64 / n_bins as f64,
            hi: (k + 1) as f64 / n_bins as f64,
            mean_speed: speed / n as f64,
            mean_remembered: frac / n as f64,
            n_examples: n,
        })
        .collect();
    let correlation = CorrelationReport::from_points(bins.iter().map(|b| (b.mean_speed, b.mean_remembered)).collect())?;
    Ok(RememberCurve { bins, correlation })
}

/// Curve over the first task's test examples of several finished runs.
pub fn first_task_curve<'a, I>(runs: I, n_bins: usize) -> Result<RememberCurve>
where
    I: IntoIterator<Item = &'a Tracking>,
{
    let (speeds, remembered): (Vec<SpeedReport>, Vec<BTreeSet<ExampleId>>) =
        runs.into_iter().map(|t| (t.speeds[0].test.clone(), t.remembered[0].test.clone())).unzip();
    speed_vs_remember_curve(&speeds, &remembered, n_bins)
}

/// Mean test learning speed of the first task's remembered examples, or
/// `None` when nothing was remembered.
pub fn remembered_mean_speed(run: &Tracking) -> Option<f64> {
    run.speeds.first()?.test.mean_over(&run.remembered.first()?.test)
}

/// Correlate buffer size with remembered speed from `(size, speed)` samples;
/// samples sharing a size are averaged into one point.
pub fn size_speed_correlation(samples: &[(usize, f64)]) -> Result<CorrelationReport> {
    let mut per_size: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &(size, y) in samples {
        per_size.entry(size).or_default().push(y);
    }
    if per_size.len() < 4 {
        return Err(AnalysisError::Config(format!("need at least 4 distinct buffer sizes, got {}", per_size.len())));
    }
    let points = per_size
        .into_iter()
        .map(|(size, ys)| (size as f64, ys.iter().sum::<f64>() / ys.len() as f64))
        .collect();
    CorrelationReport::from_points(points)
}

/// Correlate buffer size with the mean learning speed of remembered
/// first-task examples. Each size runs `replicates` paired seeds; a size's
/// y value is the mean over its seeds.
pub fn buffer_size_speed_correlation(
    base: &RunConfig,
    sizes: &[usize],
    replicates: usize,
    exec: Execution,
) -> Result<CorrelationReport> {
    let distinct: BTreeSet<usize> = sizes.iter().copied().collect();
    if distinct.len() < 4 {
        return Err(AnalysisError::Config("need at least 4 distinct buffer sizes".into()));
    }
    if replicates == 0 {
        return Err(AnalysisError::Config("replicates must be positive".into()));
    }
    let seeds = seeds::replicate_seeds(base.seed, replicates);
    let jobs: Vec<(usize, u64)> = distinct.iter().flat_map(|&b| seeds.iter().map(move |&s| (b, s))).collect();
    let results = exec.map(jobs.clone(), |(size, seed)| {
        let mut cfg = base.clone();
        cfg.buffer_capacity = size;
        cfg.seed = seed;
        cfg.output_dir = None;
        match run_experiment(&cfg) {
            Ok(r) => remembered_mean_speed(&r.tracking),
            Err(e) => {
                log::warn!("buffer size {size} seed {seed} failed: {}", e.error);
                None
            }
        }
    });
    let samples: Vec<(usize, f64)> =
        jobs.into_iter().zip(results).filter_map(|((size, _), y)| Some((size, y?))).collect();
    size_speed_correlation(&samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatCell {
    pub mean_delta: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Mean final-accuracy difference of each SBS(q, s) composition against the
/// uniform (0, 0) baseline. `cells[i][j]` belongs to `(q_grid[i], s_grid[j])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub q_grid: Vec<f64>,
    pub s_grid: Vec<f64>,
    pub cells: Vec<Vec<Option<HeatCell>>>,
}

impl Heatmap {
    pub fn get(&self, q: f64, s: f64) -> Option<HeatCell> {
        let i = self.q_grid.iter().position(|&x| x == q)?;
        let j = self.s_grid.iter().position(|&x| x == s)?;
        self.cells[i][j]
    }

    pub fn present(&self) -> impl Iterator<Item = (f64, f64, HeatCell)> + '_ {
        self.cells.iter().enumerate().flat_map(move |(i, row)| {
            row.iter().enumerate().filter_map(move |(j, c)| c.map(|c| (self.q_grid[i], self.s_grid[j], c)))
        })
    }

    /// Present cell with the largest mean delta; ties go to smaller q, then smaller s.
    pub fn best(&self) -> Option<(f64, f64, HeatCell)> {
        self.present().fold(None, |best, cur| match best {
            Some(b) if b.2.mean_delta >= cur.2.mean_delta => Some(b),
            _ => Some(cur),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("q,s,mean_delta,stderr,n\n");
        for (q, s, c) in self.present() {
            let _ = writeln!(out, "{q},{s},{},{},{}", c.mean_delta, c.stderr, c.n);
        }
        out
    }
}

pub(crate) fn check_grid(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(AnalysisError::Config(format!("{name} grid is empty")));
    }
    if grid.iter().any(|v| !(0.0..1.0).contains(v)) {
        return Err(AnalysisError::Config(format!("{name} grid values must lie in [0, 1)")));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AnalysisError::Config(format!("{name} grid must be strictly ascending")));
    }
    Ok(())
}

/// Mean and standard error of the mean. A single value has zero stderr.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Run every valid `(q, s)` cell plus the uniform baseline over the same
/// `replicates` seeds and tabulate paired deltas.
///
/// A cell with any failed run is absent. Cells with `q + s >= 1` are absent.
pub fn composition_sweep(
    base: &RunConfig,
    q_grid: &[f64],
    s_grid: &[f64],
    replicates: usize,
    exec: Execution,
) -> Result<Heatmap> {
    check_grid("q", q_grid)?;
    check_grid("s", s_grid)?;
    if replicates == 0 {
        return Err(AnalysisError::Config("replicates must be positive".into()));
    }
    let seeds = seeds::replicate_seeds(base.seed, replicates);
    let mut cells: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    for &q in q_grid {
        for &s in s_grid {
            if q + s < 1.0 && !(q == 0.0 && s == 0.0) {
                cells.push((q, s));
            }
        }
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let finals = exec.map(jobs, |(c, seed)| {
        let (q, s) = cells[c];
        let mut cfg = base.clone();
        cfg.sampler = SamplerConfig { seed: base.sampler.seed, ..SamplerConfig::sbs(q, s) };
        cfg.seed = seed;
        cfg.output_dir = None;
        match run_experiment(&cfg) {
            Ok(r) => {
                log::info!("cell q={q} s={s} seed={seed}: final accuracy {:.4}", r.mean_final_accuracy);
                Some(r.mean_final_accuracy)
            }
            Err(e) => {
                log::warn!("cell q={q} s={s} seed={seed} failed: {}", e.error);
                None
            }
        }
    });
    let per_cell: Vec<&[Option<f64>]> = finals.chunks(replicates).collect();
    let baseline = per_cell[0];
    if baseline.iter().all(Option::is_none) {
        return Err(AnalysisError::AllRunsFailed("every baseline run failed".into()));
    }
    let mut table: BTreeMap<(u64, u64), HeatCell> = BTreeMap::new();
    for (c, runs) in per_cell.iter().enumerate() {
        if runs.iter().any(Option::is_none) {
            continue;
        }
        let deltas: Vec<f64> = runs
            .iter()
            .zip(baseline)
            .filter_map(|(x, b)| Some(x.as_ref()? - b.as_ref()?))
            .collect();
        if deltas.is_empty() {
            continue;
        }
        let (mean_delta, stderr) = mean_stderr(&deltas);
        let (q, s) = cells[c];
        table.insert((q.to_bits(), s.to_bits()), HeatCell { mean_delta, stderr, n: deltas.len() });
    }
    let cells = q_grid
        .iter()
        .map(|q| s_grid.iter().map(|s| table.get(&(q.to_bits(), s.to_bits())).copied()).collect())
        .collect();
    Ok(Heatmap { q_grid: q_grid.to_vec(), s_grid: s_grid.to_vec(), cells })
}

const CELL: usize = 56;
const MARGIN: usize = 48;
const NEUTRAL: (f64, f64, f64) = (247.0, 247.0, 247.0);
const RED: (f64, f64, f64) = (178.0, 24.0, 43.0);
const BLUE: (f64, f64, f64) = (33.0, 102.0, 172.0);

fn diverging(v: f64, scale: f64) -> String {
    let t = if scale > 0.0 { (v / scale).clamp(-1.0, 1.0) } else { 0.0 };
    let end = if t >= 0.0 { RED } else { BLUE };
    let a = t.abs();
    let lerp = |x: f64, y: f64| (x + (y - x) * a).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(NEUTRAL.0, end.0), lerp(NEUTRAL.1, end.1), lerp(NEUTRAL.2, end.2))
}

/// SVG rendering with q on rows and s on columns. Red is improvement over the
/// baseline, blue is degradation; the (0, 0) cell is outlined. One `rect` per
/// present cell.
pub fn heatmap_svg(h: &Heatmap) -> Result<String> {
    let present: Vec<_> = h.present().collect();
    if present.is_empty() {
        return Err(AnalysisError::Config("heatmap has no cells".into()));
    }
    let scale = present.iter().map(|c| c.2.mean_delta.abs()).fold(0.0, f64::max);
    let w = MARGIN + CELL * h.s_grid.len();
    let ht = MARGIN + CELL * h.q_grid.len();
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{ht}" font-family="sans-serif" font-size="11">"#
    );
    for (j, s) in h.s_grid.iter().enumerate() {
        let x = MARGIN + j * CELL + CELL / 2;
        let _ = writeln!(out, r#"<text x="{x}" y="{}" text-anchor="middle">s={s}</text>"#, MARGIN - 8);
    }
    for (i, q) in h.q_grid.iter().enumerate() {
        let y = MARGIN + i * CELL + CELL / 2;
        let _ = writeln!(out, r#"<text x="{}" y="{y}" text-anchor="end">q={q}</text>"#, MARGIN - 4);
    }
    for (i, row) in h.cells.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            let Some(c) = cell else { continue };
            let (x, y) = (MARGIN + j * CELL, MARGIN + i * CELL);
            let stroke = if h.q_grid[i] == 0.0 && h.s_grid[j] == 0.0 {
                r#" stroke="black" stroke-width="3""#
            } else {
                ""
            };
            let _ = writeln!(
                out,
                r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}"{stroke}/>"#,
                diverging(c.mean_delta, scale)
            );
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" text-anchor="middle">{:+.2}</text>"#,
                x + CELL / 2,
                y + CELL / 2 + 4,
                c.mean_delta * 100.0
            );
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn render_heatmap_svg(h: &Heatmap, path: &Path) -> Result<()> {
    let svg = heatmap_svg(h)?;
    std::fs::write(path, svg)?;
    Ok(())
}
