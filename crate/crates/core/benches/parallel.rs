//! Sequential versus data-parallel execution of the two embarrassingly
//! parallel workloads: Monte-Carlo sampler trials and seed replicates.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use replay_lab::data::ShapesConfig;
use replay_lab::engine::{run_experiment, DataSource, RunConfig};
use replay_lab::exec::Execution;
use replay_lab::samplers::{reservoir_sample, uniform_sample};
use replay_lab::seeds;

const STRATEGIES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn monte_carlo(c: &mut Criterion) {
    let pool: Vec<u64> = (0..1000).collect();
    let mut group = c.benchmark_group("sampler_trials");
    for (name, exec) in STRATEGIES {
        group.bench_with_input(BenchmarkId::new(name, 2000), &exec, |b, &exec| {
            b.iter(|| {
                exec.map_range(2000, |t| {
                    let a = uniform_sample(&pool, 10, seeds::derive_indexed(1, "bench-uniform", t as u64));
                    let r = reservoir_sample(&pool, 10, seeds::derive_indexed(1, "bench-reservoir", t as u64));
                    a.ids[0] + r.ids[0]
                })
            })
        });
    }
    group.finish();
}

fn replicates(c: &mut Criterion) {
    let mut base = RunConfig::reference();
    base.data = DataSource::Shapes(ShapesConfig { train_per_class: 50, test_per_class: 25, ..ShapesConfig::default() });
    base.hyper.epochs = 3;
    base.buffer_capacity = 20;
    let seeds = seeds::replicate_seeds(0, 4);
    let mut group = c.benchmark_group("seed_replicates");
    group.sample_size(10);
    for (name, exec) in STRATEGIES {
        group.bench_with_input(BenchmarkId::new(name, seeds.len()), &exec, |b, &exec| {
            b.iter(|| {
                exec.map(seeds.clone(), |seed| {
                    let mut cfg = base.clone();
                    cfg.seed = seed;
                    run_experiment(&cfg).expect("bench run").mean_final_accuracy
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, monte_carlo, replicates);
criterion_main!(benches);
