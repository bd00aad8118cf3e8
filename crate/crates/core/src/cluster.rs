//! Seeded k-means (k-means++ seeding, Lloyd iterations) and brute-force k-NN.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const KMEANS_MAX_ITERS: usize = 50;

/// Result of k-means over row vectors of width `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    /// `clusters × dim`, row-major.
    pub centers: Vec<f64>,
    pub dim: usize,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeans {
    pub fn clusters(&self) -> usize {
        self.centers.len() / self.dim
    }

    pub fn center(&self, c: usize) -> &[f64] {
        &self.centers[c * self.dim..(c + 1) * self.dim]
    }

    /// Row indices of each cluster, in ascending order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.clusters()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(row: &[f64], centers: &[f64], dim: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, center) in centers.chunks(dim).enumerate() {
        let d = sq_dist(row, center);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// k-means on `data` (rows of width `dim`). Requires `1 ≤ k ≤ rows`.
/// Empty clusters are dropped and the remaining labels compacted, so the
/// returned cluster count may be below `k`.
pub fn kmeans(data: &[f64], dim: usize, k: usize, seed: u64, max_iters: usize) -> KMeans {
    let n = data.len() / dim;
    assert!(k >= 1 && k <= n, "kmeans needs 1 <= k <= n (k={k}, n={n})");
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), row(next)));
        }
    }
    let mut centers: Vec<f64> = chosen.iter().flat_map(|&i| row(i).to_vec()).collect();

    let mut labels: Vec<usize> = (0..n).map(|i| nearest(row(i), &centers, dim)).collect();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        update_centers(data, dim, &labels, &mut centers);
        let next: Vec<usize> = (0..n).map(|i| nearest(row(i), &centers, dim)).collect();
        if next == labels {
            converged = true;
            break;
        }
        labels = next;
    }
    update_centers(data, dim, &labels, &mut centers);

    // compact away empty clusters
    let k_now = centers.len() / dim;
    let mut counts = vec![0usize; k_now];
    for &l in &labels {
        counts[l] += 1;
    }
    let mut remap = vec![usize::MAX; k_now];
    let mut kept = Vec::new();
    for c in 0..k_now {
        if counts[c] > 0 {
            remap[c] = kept.len() / dim;
            kept.extend_from_slice(&centers[c * dim..(c + 1) * dim]);
        }
    }
    KMeans {
        labels: labels.iter().map(|&l| remap[l]).collect(),
        centers: kept,
        dim,
        iterations,
        converged,
    }
}

fn update_centers(data: &[f64], dim: usize, labels: &[usize], centers: &mut [f64]) {
    let k = centers.len() / dim;
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for j in 0..dim {
            sums[l * dim + j] += data[i * dim + j];
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            for j in 0..dim {
                centers[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
            }
        }
    }
}

/// For every row, the `k` nearest other rows by Euclidean distance,
/// nearest first; ties go to the lower index.
pub fn knn(data: &[f64], dim: usize, k: usize) -> Vec<Vec<usize>> {
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    (0..n)
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(row(i), row(j)), j))
                .collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}
