//! Sequential versus parallel checkpoint sweeps and fuzz campaigns.
//!
//! With the `parallel` feature off both variants run sequentially.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use manakin::harness::{ckpt_sweep, fuzz, SweepConfig, WorkloadKind};

fn sweep_config(parallel: bool) -> SweepConfig {
    SweepConfig {
        workloads: vec![WorkloadKind::P2pRing, WorkloadKind::CollectiveStorm],
        procs: vec![4, 8],
        min_points: 50,
        parallel,
        ..SweepConfig::default()
    }
}

fn bench_sweep(c: &mut Criterion) {
    let mut g = c.benchmark_group("ckpt_sweep");
    g.sample_size(10);
    for (name, parallel) in [("sequential", false), ("parallel", true)] {
        g.bench_with_input(BenchmarkId::from_parameter(name), &parallel, |b, &parallel| {
            b.iter(|| black_box(ckpt_sweep(&sweep_config(parallel)).unwrap().points()))
        });
    }
    g.finish();
}

fn bench_fuzz(c: &mut Criterion) {
    let mut g = c.benchmark_group("fuzz");
    g.sample_size(10);
    for (name, parallel) in [("sequential", false), ("parallel", true)] {
        g.bench_with_input(BenchmarkId::from_parameter(name), &parallel, |b, &parallel| {
            b.iter(|| black_box(fuzz(42, 200, 8, parallel).unwrap().cases.len()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_sweep, bench_fuzz);
criterion_main!(benches);
