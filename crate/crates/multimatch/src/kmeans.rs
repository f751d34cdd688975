//! Lloyd's k-means with seeded k-means++ initialization and restarts.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

const MAX_ITERS: usize = 200;

/// Clusters `points` (row-major, `dim` columns) into `k` groups.
/// Runs `restarts` seeded initializations and keeps the lowest-inertia run.
/// Returns the assignment of each point.
pub fn cluster(points: &[f64], dim: usize, k: usize, restarts: usize, seed: u64) -> Vec<usize> {
    assert!(dim > 0 && k > 0);
    let n = points.len() / dim;
    if k == 1 || n <= k {
        // Degenerate: either one cluster or one point per cluster.
        if k == 1 {
            return vec![0; n];
        }
        return (0..n).collect();
    }
    let mut best_assign = Vec::new();
    let mut best_inertia = f64::INFINITY;
    for restart in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(restart as u64));
        let (assign, inertia) = lloyd(points, dim, k, &mut rng);
        if inertia < best_inertia {
            best_inertia = inertia;
            best_assign = assign;
        }
    }
    best_assign
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn lloyd(points: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let n = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];

    // k-means++ style seeding: first center uniform, then squared-distance
    // weighted draws.
    let mut centers: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centers.extend_from_slice(point(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(first))).collect();
    while centers.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let chosen = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        };
        centers.extend_from_slice(point(chosen));
        let c = centers.len() / dim - 1;
        for i in 0..n {
            let d = sq_dist(point(i), &centers[c * dim..(c + 1) * dim]);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let mut assign = vec![0usize; n];
    let mut prev = vec![usize::MAX; n];
    for _ in 0..MAX_ITERS {
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = sq_dist(point(i), &centers[c * dim..(c + 1) * dim]);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assign[i] = best;
        }
        if assign == prev {
            break;
        }
        prev.copy_from_slice(&assign);
        let mut counts = vec![0usize; k];
        let mut sums = vec![0.0; k * dim];
        for i in 0..n {
            counts[assign[i]] += 1;
            for d in 0..dim {
                sums[assign[i] * dim + d] += points[i * dim + d];
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue; // empty cluster keeps its center
            }
            for d in 0..dim {
                centers[c * dim + d] = sums[c * dim + d] / counts[c] as f64;
            }
        }
    }
    let inertia = (0..n)
        .map(|i| sq_dist(point(i), &centers[assign[i] * dim..(assign[i] + 1) * dim]))
        .sum();
    (assign, inertia)
}
