mod common;

use std::collections::BTreeMap;

use replay_lab::data::{generate_shapes, randomize_labels, rotation_task, split_into_tasks, ClassOrder, RotationMode, ShapesConfig};
use replay_lab::engine::{refresh_buffer, ReplayBuffer};
use replay_lab::samplers::{reservoir_update, sbs_sample, SamplerConfig};
use replay_lab::seeds;
use replay_lab::tensor::{NetSpec, Network};

#[test]
fn sbs_sample_is_uniform_over_the_filtered_set() {
    // Ten speeds 0.0..0.9; q = s = 0.2 keeps the six middle ids.
    let speeds: BTreeMap<u64, f64> = (0..10).map(|i| (i, i as f64 / 10.0)).collect();
    let pool: Vec<u64> = speeds.keys().copied().collect();
    let report = common::report(&speeds);
    let mut hits = BTreeMap::new();
    let trials = 10_000;
    for t in 0..trials {
        let sel = sbs_sample(&pool, &report, 0.2, 0.2, 3, seeds::derive_indexed(8, "mc-sbs", t)).unwrap();
        for id in sel.ids {
            *hits.entry(id).or_insert(0usize) += 1;
        }
    }
    assert_eq!(hits.keys().copied().collect::<Vec<_>>(), vec![2, 3, 4, 5, 6, 7]);
    for (id, h) in hits {
        let f = h as f64 / trials as f64;
        assert!((f - 0.5).abs() <= 0.02, "id {id} included with frequency {f}");
    }
}

#[test]
fn reservoir_of_one_keeps_second_item_half_the_time() {
    let trials = 10_000;
    let mut second = 0;
    for t in 0..trials {
        let mut rng = seeds::rng(seeds::derive_indexed(3, "mc-res1", t));
        let mut buf = Vec::new();
        assert!(reservoir_update(&mut buf, 'a', 1, 1, &mut rng));
        reservoir_update(&mut buf, 'b', 2, 1, &mut rng);
        second += usize::from(buf == ['b']);
    }
    let f = second as f64 / trials as f64;
    assert!((f - 0.5).abs() <= 0.02, "second item kept with frequency {f}");
}

#[test]
fn eviction_is_uniform_over_incumbents() {
    let data = generate_shapes(&ShapesConfig::new(4, 30, 8, 5)).unwrap();
    let tasks = split_into_tasks(&data, 2, ClassOrder::Given).unwrap();
    let net = Network::init(NetSpec::new(tasks.shape(), vec![8], 4), 0).unwrap();
    let uniform = SamplerConfig::uniform();
    let mut first = ReplayBuffer::new(20);
    refresh_buffer(&mut first, &tasks.tasks()[0], None, &net, &uniform, 1).unwrap();
    let incumbents = first.ids_of_task(0);
    assert_eq!(incumbents.len(), 20);

    let refreshes = 5000;
    let mut survived: BTreeMap<u64, usize> = BTreeMap::new();
    for r in 0..refreshes {
        let mut buf = first.clone();
        let out = refresh_buffer(&mut buf, &tasks.tasks()[1], None, &net, &uniform, seeds::derive_indexed(2, "mc-evict", r)).unwrap();
        assert_eq!((out.evicted, out.added), (10, 10));
        for id in buf.ids_of_task(0) {
            *survived.entry(id).or_default() += 1;
        }
    }
    for id in incumbents {
        let f = survived.get(&id).copied().unwrap_or(0) as f64 / refreshes as f64;
        assert!((f - 0.5).abs() <= 0.03, "incumbent {id} survived with frequency {f}");
    }
}

#[test]
fn random_labels_change_at_the_expected_rate() {
    let data = generate_shapes(&ShapesConfig::new(5, 400, 8, 2)).unwrap().train;
    let relabeled = randomize_labels(&data, 11);
    let n = data.len() as f64;
    let changed = relabeled.examples().iter().zip(data.examples()).filter(|(a, b)| a.label != b.label).count() as f64;
    let p = 1.0 - 1.0 / 5.0;
    let sd = (n * p * (1.0 - p)).sqrt();
    assert!((changed - n * p).abs() <= 3.0 * sd, "{changed} of {n} labels changed");
    assert_eq!(randomize_labels(&data, 11), relabeled);
}

#[test]
fn rotation_labels_are_balanced() {
    let data = generate_shapes(&ShapesConfig::new(4, 500, 8, 3)).unwrap().train;
    let rotated = rotation_task(&data, RotationMode::FourWay, 6).unwrap();
    let n = data.len() as f64;
    let sd = (n * 0.25 * 0.75).sqrt();
    for k in 0..4 {
        let c = rotated.examples().iter().filter(|e| e.label == k).count() as f64;
        assert!((c - n / 4.0).abs() <= 3.0 * sd, "rotation {k} drawn {c} times of {n}");
    }
}
