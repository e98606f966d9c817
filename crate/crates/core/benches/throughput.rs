//! Criterion benchmarks for the MIM training step.
//!
//! Two questions, both answered on the bench-medium config so numbers are
//! comparable with `hivit bench` and the acceptance gate:
//!
//!   1. sparse vs dense: one full step (forward + backward) with the sparse
//!      visible-only encoder against the dense masked baseline, ratio 0.75.
//!   2. thread scaling: the sparse step under a forced sequential limit
//!      versus the default rayon pool, so the `parallel` feature's win is
//!      measured rather than assumed.
//!
//! Run with `cargo bench -p hivit-core`. Sample sizes are small because a
//! single step at this scale takes on the order of a second.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use hivit_core::bench::{bench_inputs, mim_step, BenchInputs};
use hivit_core::config::HiViTConfig;
use hivit_core::model::params::ParamSet;
use hivit_core::parallel;

const SEED: u64 = 17;
const BATCH: usize = 2;
const RATIO: f64 = 0.75;

fn setup() -> (HiViTConfig, ParamSet<f32>, BenchInputs<f32>) {
    let cfg = HiViTConfig::preset("bench-medium").expect("known preset");
    let set = ParamSet::build(&cfg, SEED, true);
    let inputs = bench_inputs::<f32>(&cfg, RATIO, BATCH, SEED);
    (cfg, set, inputs)
}

fn sparse_vs_dense(c: &mut Criterion) {
    let (cfg, set, inputs) = setup();
    let mut group = c.benchmark_group("mim-step");
    group.sample_size(10);
    group.bench_function("sparse", |b| {
        b.iter(|| mim_step(&cfg, &set, &inputs, true));
    });
    group.bench_function("dense", |b| {
        b.iter(|| mim_step(&cfg, &set, &inputs, false));
    });
    group.finish();
}

fn thread_scaling(c: &mut Criterion) {
    let (cfg, set, inputs) = setup();
    let mut group = c.benchmark_group("sparse-step-threads");
    group.sample_size(10);
    // limit 1 short-circuits rayon entirely (the sequential fallback path);
    // limit 0 restores the default pool. Larger explicit limits are not
    // benchmarked here because the global pool can only be sized once per
    // process.
    for &limit in &[1u32, 0] {
        let label = if limit == 1 { "sequential" } else { "default-pool" };
        parallel::set_thread_limit(limit as usize);
        group.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter(|| mim_step(&cfg, &set, &inputs, true));
        });
    }
    parallel::set_thread_limit(0);
    group.finish();
}

criterion_group!(benches, sparse_vs_dense, thread_scaling);
criterion_main!(benches);
