//! Compares the data-parallel map (rayon when the `parallel` feature is on)
//! against the always-sequential fallback on the two hot loops: the
//! nearest-neighbor distance scan and a whole simulation cell.
//!
//! Run with the default features for the parallel numbers, then with
//! `--no-default-features` to see the sequential build of the same loops:
//!
//! ```text
//! cargo bench --bench parallel_vs_sequential
//! cargo bench --bench parallel_vs_sequential --no-default-features
//! ```

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use multimatch::parallel;
use multimatch::sim::{run_cell, SimConfig, SimEstimator};

fn feature_label() -> &'static str {
    if cfg!(feature = "parallel") {
        "parallel"
    } else {
        "sequential-build"
    }
}

/// The shape of the matching inner loop: for every unit, scan all units and
/// keep the nearest neighbor index.
fn nn_scan(
    x: &DMatrix<f64>,
    map: impl Fn(usize, &(dyn Fn(usize) -> usize + Sync)) -> Vec<usize>,
) -> usize {
    let n = x.nrows();
    let p = x.ncols();
    let body = |i: usize| -> usize {
        let mut best = (f64::INFINITY, usize::MAX);
        for j in 0..n {
            if j == i {
                continue;
            }
            let d2: f64 = (0..p).map(|c| (x[(i, c)] - x[(j, c)]).powi(2)).sum();
            if (d2, j) < best {
                best = (d2, j);
            }
        }
        best.1
    };
    map(n, &body).iter().sum()
}

fn bench_nn_scan(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = DMatrix::from_fn(2_000, 6, |_, _| rng.gen::<f64>());
    let mut group = c.benchmark_group("nn_scan_2000x6");
    group.bench_with_input(
        BenchmarkId::new(feature_label(), "map_indexed"),
        &x,
        |b, x| b.iter(|| nn_scan(x, |n, f| parallel::map_indexed(n, f))),
    );
    group.bench_with_input(
        BenchmarkId::new("sequential", "map_indexed_seq"),
        &x,
        |b, x| b.iter(|| nn_scan(x, |n, f| parallel::map_indexed_seq(n, f))),
    );
    group.finish();
}

fn bench_run_cell(c: &mut Criterion) {
    let cfg = SimConfig {
        n1: 100,
        replications: 4,
        seed: 11,
        estimators: vec![SimEstimator::BasicNew, SimEstimator::BcNew],
        ..SimConfig::baseline()
    };
    let mut group = c.benchmark_group("run_cell_n100x4");
    group.sample_size(10);
    group.bench_function(feature_label(), |b| {
        b.iter(|| run_cell(&cfg).expect("cell runs"))
    });
    group.finish();
}

criterion_group!(benches, bench_nn_scan, bench_run_cell);
criterion_main!(benches);
