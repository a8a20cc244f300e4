//! Discrete patch tokens from a k-means codebook.
//!
//! The codebook is fit once on a public patch pool at the server and then
//! broadcast, so clients only ever *assign* tokens. Fitting is Lloyd's
//! algorithm with k-means++ seeding; assignment is nearest-centroid with ties
//! broken towards the lower index, which keeps every token decision
//! order-independent and reproducible.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::numerics::tensor::Real;
use crate::seeds;

/// A fitted set of centroids plus the metadata of its fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<F: Real> {
    centroids: Vec<F>,
    dim: usize,
    /// Lloyd iterations actually executed (early-stops on a fixed point).
    pub iterations: usize,
    /// Final sum of squared distances of the fitting pool to its centroids.
    pub inertia: f64,
    pub seed: u64,
}

impl<F: Real> Codebook<F> {
    /// Wrap raw centroids (checkpoint restore, hand-built fixtures).
    pub fn from_centroids(centroids: Vec<F>, dim: usize) -> Result<Self> {
        ensure!(dim > 0, "centroid length must be positive");
        ensure!(
            centroids.len() % dim == 0,
            "centroid buffer of {} values is not a multiple of length {dim}",
            centroids.len()
        );
        let k = centroids.len() / dim;
        ensure!(k >= 2, "codebook needs at least two centroids, got {k}");
        ensure!(
            centroids.iter().all(|v| v.is_finite()),
            "centroids must be finite"
        );
        for a in 0..k {
            for b in a + 1..k {
                ensure!(
                    centroids[a * dim..(a + 1) * dim] != centroids[b * dim..(b + 1) * dim],
                    "centroids {a} and {b} are identical"
                );
            }
        }
        Ok(Codebook {
            centroids,
            dim,
            iterations: 0,
            inertia: f64::NAN,
            seed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, j: usize) -> &[F] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn centroids(&self) -> &[F] {
        &self.centroids
    }
}

fn dist2<F: Real>(a: &[F], b: &[F]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn tokenize<F: Real>(patch: &[F], cb: &Codebook<F>) -> Result<usize> {
    ensure!(
        patch.len() == cb.dim(),
        "patch length {} does not match centroid length {}",
        patch.len(),
        cb.dim()
    );
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for j in 0..cb.len() {
        let d = dist2(patch, cb.centroid(j));
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    Ok(best)
}

/// Independent Lloyd runs per fit; the lowest-inertia run wins. A single
/// k-means++ start can settle several percent above the reachable optimum, and
/// a handful of restarts closes that gap while staying deterministic.
const RESTARTS: u64 = 8;

/// Fit a codebook of `k` centroids on a flat `[n, dim]` patch pool.
pub fn fit_codebook<F: Real>(
    patches: &[F],
    dim: usize,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<Codebook<F>> {
    ensure!(dim > 0, "patch length must be positive");
    ensure!(
        patches.len() % dim == 0,
        "patch buffer of {} values is not a multiple of length {dim}",
        patches.len()
    );
    ensure!(k >= 2, "codebook needs at least two centroids, got {k}");
    let n = patches.len() / dim;
    let row = |i: usize| &patches[i * dim..(i + 1) * dim];

    // The pool must contain at least k distinct patches, or Lloyd's can never
    // separate k clusters.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| {
        row(a)
            .iter()
            .map(|&v| v.to_f64())
            .partial_cmp(row(b).iter().map(|&v| v.to_f64()))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut distinct = if n == 0 { 0 } else { 1 };
    for w in order.windows(2) {
        if row(w[0]) != row(w[1]) {
            distinct += 1;
        }
    }
    ensure!(
        distinct >= k,
        "pool has {distinct} distinct patches, need at least {k}"
    );

    let mut best: Option<(Vec<f64>, usize, f64)> = None;
    for restart in 0..RESTARTS {
        let run = lloyd_run(patches, dim, k, iters, seed, restart)?;
        if best.as_ref().is_none_or(|b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (centroids, iterations, inertia) = best.expect("at least one restart runs");

    let centroids: Vec<F> = centroids.iter().map(|&v| F::from_f64(v)).collect();
    let mut cb = Codebook::from_centroids(centroids, dim)?;
    cb.iterations = iterations;
    cb.inertia = inertia;
    cb.seed = seed;
    Ok(cb)
}

/// One k-means++ seeding plus Lloyd iterations; returns centroids, the
/// iteration count actually executed, and the final inertia.
fn lloyd_run<F: Real>(
    patches: &[F],
    dim: usize,
    k: usize,
    iters: usize,
    seed: u64,
    restart: u64,
) -> Result<(Vec<f64>, usize, f64)> {
    let n = patches.len() / dim;
    let row = |i: usize| &patches[i * dim..(i + 1) * dim];
    let mut rng = seeds::stream(seed, &[seeds::domain::KMEANS, restart]);

    // k-means++ seeding: first centroid uniform, then proportional to the
    // squared distance to the nearest chosen centroid.
    let mut centroids: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend(row(first).iter().map(|&v| v.to_f64()));
    let mut min_d2: Vec<f64> = (0..n).map(|i| dist2_f64(row(i), &centroids[..dim])).collect();
    while centroids.len() < k * dim {
        let total: f64 = min_d2.iter().sum();
        ensure!(total > 0.0, "ran out of distinct seeding candidates");
        let mut target = rng.random_range(0.0..total);
        let mut chosen = n - 1;
        for (i, &d) in min_d2.iter().enumerate() {
            if target < d {
                chosen = i;
                break;
            }
            target -= d;
        }
        let start = centroids.len();
        centroids.extend(row(chosen).iter().map(|&v| v.to_f64()));
        let new_c = centroids[start..start + dim].to_vec();
        for i in 0..n {
            let d = dist2_f64(row(i), &new_c);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }

    // Lloyd iterations with early stop on stable assignments.
    let mut assignment = vec![usize::MAX; n];
    let mut inertia = f64::NAN;
    let mut iterations = 0;
    for _ in 0..iters {
        let mut changed = false;
        let mut total = 0.0;
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for j in 0..k {
                let d = dist2_f64(row(i), &centroids[j * dim..(j + 1) * dim]);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
            total += best_d;
        }
        inertia = total;
        if !changed {
            break;
        }
        iterations += 1;

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let j = assignment[i];
            counts[j] += 1;
            for (s, &v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(row(i)) {
                *s += v.to_f64();
            }
        }
        // Re-seed empty clusters from the farthest points, one point each.
        let mut reseeded = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                for (c, &s) in centroids[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..]) {
                    *c = s / counts[j] as f64;
                }
                continue;
            }
            let mut far = usize::MAX;
            let mut far_d = -1.0;
            for i in 0..n {
                if reseeded[i] {
                    continue;
                }
                let d = dist2_f64(
                    row(i),
                    &centroids[assignment[i] * dim..(assignment[i] + 1) * dim],
                );
                if d > far_d {
                    far_d = d;
                    far = i;
                }
            }
            ensure!(far != usize::MAX, "no candidate left to re-seed cluster {j}");
            reseeded[far] = true;
            for (c, &v) in centroids[j * dim..(j + 1) * dim].iter_mut().zip(row(far)) {
                *c = v.to_f64();
            }
        }
    }

    Ok((centroids, iterations, inertia))
}

fn dist2_f64<F: Real>(a: &[F], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.to_f64() - y;
            d * d
        })
        .sum()
}
