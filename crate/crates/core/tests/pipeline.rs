use replay_lab::analysis::{composition_sweep, heatmap_svg};
use replay_lab::data::ShapesConfig;
use replay_lab::engine::{run_experiment, DataSource, EvalMode, RunConfig};
use replay_lab::exec::Execution;
use replay_lab::hpsearch::{argmax, select_qs_via_rotation, HpSearchConfig};
use replay_lab::samplers::{SamplerConfig, SamplerKind};
use replay_lab::seeds;
use replay_lab::speed::TrackerMode;

fn small() -> RunConfig {
    let mut cfg = RunConfig::reference();
    cfg.data = DataSource::Shapes(ShapesConfig { train_per_class: 40, test_per_class: 20, ..ShapesConfig::default() });
    cfg.hyper.epochs = 4;
    cfg.buffer_capacity = 24;
    cfg
}

#[test]
fn every_sampler_runs_end_to_end() {
    for kind in SamplerKind::ALL {
        let cfg = RunConfig { sampler: SamplerConfig { kind, q: 0.2, s: 0.2, ..SamplerConfig::default() }, ..small() };
        let r = run_experiment(&cfg).unwrap_or_else(|e| panic!("{}: {e}", kind.name()));
        assert_eq!(r.buffer.len(), 24, "{}", kind.name());
        assert!(r.buffer.entries().iter().all(|e| e.task == 0));
        assert!(r.mean_til() >= r.mean_cil());
    }
}

#[test]
fn full_matrix_rows_average_to_speeds() {
    let cfg = RunConfig { tracker_mode: TrackerMode::FullMatrix, ..small() };
    let r = run_experiment(&cfg).unwrap();
    let matrices = r.tracking.matrices.as_ref().unwrap();
    for (t, m) in matrices.iter().enumerate() {
        assert_eq!(m.test.epochs(), 4);
        for (col, id) in m.test.ids.iter().enumerate() {
            let correct = m.test.rows.iter().filter(|row| row[col]).count();
            assert_eq!(correct as f64 / 4.0, r.tracking.speeds[t].test.speeds[id]);
        }
    }
    let running = run_experiment(&small()).unwrap();
    assert_eq!(running.tracking.speeds, r.tracking.speeds);
    assert!(running.tracking.matrices.is_none());
}

#[test]
fn single_task_run_remembers_what_it_ends_correct_on() {
    let cfg = RunConfig { num_tasks: 1, ..small() };
    let r = run_experiment(&cfg).unwrap();
    assert!(r.refreshes.is_empty());
    assert!(r.buffer.is_empty());
    let correct = (r.final_accuracies[0] * 160.0).round() as usize;
    assert_eq!(r.tracking.remembered[0].test.len(), correct);
}

#[test]
fn class_incremental_scoring_never_beats_task_incremental() {
    let cfg = RunConfig { eval_mode: EvalMode::Cil, ..small() };
    let r = run_experiment(&cfg).unwrap();
    assert_eq!(r.final_accuracies, r.final_cil);
    assert!(r.final_til.iter().zip(&r.final_cil).all(|(t, c)| t >= c));
}

#[test]
fn large_buffer_beats_no_buffer() {
    // Capacity covers the whole first task, so uniform sampling stores it all.
    let seeds = seeds::replicate_seeds(0, 5);
    let first_task = |capacity: usize| -> Vec<f64> {
        Execution::Parallel.map(seeds.clone(), |seed| {
            let cfg = RunConfig { buffer_capacity: capacity, seed, ..RunConfig::reference() };
            run_experiment(&cfg).unwrap().final_accuracies[0]
        })
    };
    let with = first_task(800);
    let without = first_task(0);
    for (w, o) in with.iter().zip(&without) {
        assert!(w > o, "buffered {w} vs unbuffered {o}");
    }
}

#[test]
fn small_sweep_shape() {
    let h = composition_sweep(&small(), &[0.0, 0.5], &[0.0, 0.5], 1, Execution::Parallel).unwrap();
    assert_eq!(h.get(0.0, 0.0).unwrap().mean_delta, 0.0);
    assert!(h.get(0.5, 0.5).is_none());
    assert_eq!(h.present().count(), 3);
    assert_eq!(h.to_csv().lines().count(), 4);
    assert_eq!(heatmap_svg(&h).unwrap().matches("<rect").count(), 3);
    let again = composition_sweep(&small(), &[0.0, 0.5], &[0.0, 0.5], 1, Execution::Sequential).unwrap();
    assert_eq!(h, again);
}

#[test]
fn rotation_search() {
    let base = small();
    let tasks = base.build_tasks().unwrap();
    let task = &tasks.tasks()[0];
    let singleton = HpSearchConfig { q_grid: vec![0.2], s_grid: vec![0.2], repeats: 1, ..HpSearchConfig::default() };
    let r = select_qs_via_rotation(task, tasks.shape(), &base, &singleton, Execution::Parallel).unwrap();
    assert_eq!((r.q, r.s), (0.2, 0.2));

    let grid = HpSearchConfig { q_grid: vec![0.0, 0.3], s_grid: vec![0.0, 0.3], repeats: 2, ..HpSearchConfig::default() };
    let a = select_qs_via_rotation(task, tasks.shape(), &base, &grid, Execution::Parallel).unwrap();
    let b = select_qs_via_rotation(task, tasks.shape(), &base, &grid, Execution::Sequential).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.table.len(), 4);
    let best = argmax(&a.table).unwrap();
    assert_eq!((best.q, best.s), (a.q, a.s));
    let baseline = a.table.iter().find(|r| r.q == 0.0 && r.s == 0.0).unwrap();
    assert!(best.mean_final_acc >= baseline.mean_final_acc);
    assert!(a.to_csv().starts_with("q,s,mean_final_acc,stderr,n\n"));
}

#[test]
fn failed_config_is_reported_with_stage() {
    let cfg = RunConfig { sampler: SamplerConfig::sbs(0.6, 0.5), ..small() };
    let err = run_experiment(&cfg).unwrap_err();
    assert_eq!(err.stage.to_string(), "config");
}
