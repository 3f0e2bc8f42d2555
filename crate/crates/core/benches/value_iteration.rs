//! Compares the sequential and rayon-parallel value-iteration sweeps, and
//! times a full level training pass, on the default grid.

use criterion::{criterion_group, criterion_main, Criterion};
use mergeplan_core::grid::{GridParams, RewardParams};
use mergeplan_core::levelk::{self, TrainConfig, TrainingGame};

fn bench_sweeps(c: &mut Criterion) {
    let params = GridParams::default();
    let rewards = RewardParams::default();
    let game = TrainingGame::build(&params, &rewards).expect("valid params");
    let prev: Vec<f64> = (0..game.num_states)
        .map(|s| ((s * 2654435761) % 97) as f64 * 0.1 - 4.0)
        .collect();

    let mut group = c.benchmark_group("sweep");
    group.sample_size(20);
    group.bench_function("sequential", |b| {
        let mut out = vec![0.0; game.num_states];
        b.iter(|| levelk::sweep_sequential(&game, None, &prev, &mut out, 0.95));
    });
    #[cfg(feature = "parallel")]
    group.bench_function("parallel", |b| {
        let mut out = vec![0.0; game.num_states];
        b.iter(|| levelk::sweep(&game, None, &prev, &mut out, 0.95));
    });
    group.finish();
}

fn bench_level0(c: &mut Criterion) {
    let params = GridParams::default();
    let rewards = RewardParams::default();
    let cfg = TrainConfig::default();

    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("level0_default_grid", |b| {
        b.iter(|| levelk::compute_level0(&params, &rewards, &cfg).expect("converges"));
    });
    group.finish();
}

criterion_group!(benches, bench_sweeps, bench_level0);
criterion_main!(benches);
