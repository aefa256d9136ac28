//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use replay_lab::data::ExampleId;
use replay_lab::samplers::{reservoir_update, uniform_sample};
use replay_lab::seeds;
use replay_lab::speed::{EvalSplit, SpeedReport, SpeedTracker, TrackerMode};
use replay_lab::tensor::{InputDims, Matrix, NetSpec, Network};

pub fn report(speeds: &BTreeMap<ExampleId, f64>) -> SpeedReport {
    SpeedReport { speeds: speeds.clone(), task_index: 0, evaluated_on: EvalSplit::Train }
}

/// Sort-and-slice: order by speed descending with ascending-id ties, then cut
/// whole counts from each end.
pub fn sbs_brute_force(speeds: &BTreeMap<ExampleId, f64>, q: f64, s: f64) -> Vec<ExampleId> {
    let mut rows: Vec<(ExampleId, f64)> = speeds.iter().map(|(&i, &v)| (i, v)).collect();
    for i in 0..rows.len() {
        for j in 0..rows.len() - 1 - i {
            let (a, b) = (rows[j], rows[j + 1]);
            let swap = a.1 < b.1 || (a.1 == b.1 && a.0 > b.0);
            if swap {
                rows.swap(j, j + 1);
            }
        }
    }
    let n = rows.len();
    let top = (q * n as f64).floor() as usize;
    let bottom = (s * n as f64).floor() as usize;
    rows.iter().skip(top).take(n - top - bottom).map(|r| r.0).collect()
}

/// Record a random correctness pattern in both tracker modes and compare
/// their speeds with `correct / E` computed directly. Returns whether all
/// three agree bit for bit.
pub fn tracker_pattern_agrees(seed: u64) -> bool {
    let mut rng = seeds::rng(seed);
    let epochs = rng.random_range(1..=40);
    let n = rng.random_range(1..=30);
    let ids: Vec<ExampleId> = (0..n).map(|i| 1000 + 7 * i as u64).collect();
    let density: f64 = rng.random();
    let pattern: Vec<Vec<bool>> = (0..epochs).map(|_| (0..n).map(|_| rng.random_bool(density)).collect()).collect();
    let mut full = SpeedTracker::new(TrackerMode::FullMatrix, epochs, &ids).unwrap();
    let mut mean = SpeedTracker::new(TrackerMode::RunningMean, epochs, &ids).unwrap();
    // Epochs may be recorded in any order.
    let mut order: Vec<usize> = (0..epochs).collect();
    rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
    for &e in &order {
        let row = || ids.iter().copied().zip(pattern[e].iter().copied());
        full.record_epoch(e, row()).unwrap();
        mean.record_epoch(e, row().rev()).unwrap();
    }
    let a = full.learning_speeds(0, EvalSplit::Train).unwrap();
    let b = mean.learning_speeds(0, EvalSplit::Train).unwrap();
    ids.iter().enumerate().all(|(col, id)| {
        let correct = pattern.iter().filter(|row| row[col]).count();
        let expected = correct as f64 / epochs as f64;
        a.speeds[id].to_bits() == expected.to_bits() && b.speeds[id].to_bits() == expected.to_bits()
    })
}

/// Largest relative error between analytic and central-difference gradients
/// of the mean cross-entropy for a random small network and batch.
pub fn gradient_check(seed: u64) -> f64 {
    let mut rng = seeds::rng(seeds::derive(seed, "gradcheck"));
    let dims = InputDims { height: rng.random_range(1..=3), width: rng.random_range(1..=3), channels: 1 };
    let depth = rng.random_range(0..=2);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=6)).collect();
    let outputs = rng.random_range(2..=5);
    let mut net = Network::init(NetSpec::new(dims, hidden, outputs), seed).unwrap();
    // Nonzero biases so every parameter kind is exercised.
    for layer in net.layers_mut() {
        for b in &mut layer.bias {
            *b = rng.random_range(-0.3..0.3);
        }
    }
    let rows = rng.random_range(1..=6);
    let data: Vec<f64> = (0..rows * dims.flat()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let batch = Matrix::from_vec(rows, dims.flat(), data).unwrap();
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..outputs)).collect();

    let (_, grads) = net.loss_and_gradients(&batch, &labels).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for l in 0..net.layers().len() {
        let n_w = net.layers()[l].weights.as_slice().len();
        let n_b = net.layers()[l].bias.len();
        for p in 0..n_w + n_b {
            let analytic = if p < n_w { grads.layers[l].weights.as_slice()[p] } else { grads.layers[l].bias[p - n_w] };
            let probe = |delta: f64| {
                let mut shifted = net.clone();
                let layer = &mut shifted.layers_mut()[l];
                if p < n_w {
                    layer.weights.as_mut_slice()[p] += delta;
                } else {
                    layer.bias[p - n_w] += delta;
                }
                shifted.loss(&batch, &labels).unwrap()
            };
            let numeric = (probe(h) - probe(-h)) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs());
            let err = if scale < 1e-7 { (analytic - numeric).abs() } else { (analytic - numeric).abs() / scale };
            worst = worst.max(err);
        }
    }
    worst
}

/// Inclusion frequency of every pool element over seeded uniform samples.
pub fn uniform_inclusion(pool_size: usize, n: usize, trials: usize, master: u64) -> Vec<f64> {
    let pool: Vec<ExampleId> = (0..pool_size as u64).collect();
    let mut hits = vec![0usize; pool_size];
    for t in 0..trials {
        for id in uniform_sample(&pool, n, seeds::derive_indexed(master, "mc-uniform", t as u64)).ids {
            hits[id as usize] += 1;
        }
    }
    hits.into_iter().map(|h| h as f64 / trials as f64).collect()
}

/// Retention frequency of every stream item over seeded reservoir replays.
pub fn reservoir_retention(stream: usize, capacity: usize, replays: usize, master: u64) -> Vec<f64> {
    let mut hits = vec![0usize; stream];
    for r in 0..replays {
        let mut rng = seeds::rng(seeds::derive_indexed(master, "mc-reservoir", r as u64));
        let mut buf = Vec::with_capacity(capacity);
        for item in 0..stream {
            reservoir_update(&mut buf, item, item as u64 + 1, capacity, &mut rng);
        }
        for item in buf {
            hits[item] += 1;
        }
    }
    hits.into_iter().map(|h| h as f64 / replays as f64).collect()
}
