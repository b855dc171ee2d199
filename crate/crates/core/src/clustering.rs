//! k-means, silhouette scoring and nearest-neighbour lookup.
//!
//! All routines work on plain Euclidean distance and break ties toward the
//! lower index so that results depend only on the input and the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Matrix;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const MAX_SILHOUETTE_K: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step, first entry is the initial one.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    /// Indices assigned to cluster `j`, ascending.
    pub fn members(&self, j: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == j)
            .collect()
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

fn nearest_centroid(x: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter_rows().enumerate() {
        let d = squared_distance(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_all(points: &Matrix, centroids: &Matrix) -> (Vec<usize>, f64) {
    let pairs: Vec<(usize, f64)> = (0..points.rows())
        .into_par_iter()
        .map(|i| nearest_centroid(points.row(i), centroids))
        .collect();
    let inertia = pairs.iter().map(|p| p.1).sum();
    (pairs.into_iter().map(|p| p.0).collect(), inertia)
}

fn plus_plus_init(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = points.rows();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // Every point coincides with a chosen centre.
            let rest: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            rest[rng.gen_range(0..rest.len())]
        };
        chosen.push(next);
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(squared_distance(points.row(i), points.row(next)));
        }
    }
    let rows: Vec<&[f64]> = chosen.iter().map(|&i| points.row(i)).collect();
    Matrix::from_rows(&rows, points.cols()).expect("rows share a width")
}

fn update_centroids(points: &Matrix, assignments: &mut [usize], k: usize) -> Matrix {
    let d = points.cols();
    let means = |assignments: &[usize]| {
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, x) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for (j, &c) in counts.iter().enumerate() {
            if c > 0 {
                for s in sums.row_mut(j) {
                    *s /= c as f64;
                }
            }
        }
        (sums, counts)
    };
    let (mut centroids, mut counts) = means(assignments);
    let mut repaired = false;
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let mut far = None::<(usize, f64)>;
        for (i, &a) in assignments.iter().enumerate() {
            if counts[a] < 2 {
                continue;
            }
            let dist = squared_distance(points.row(i), centroids.row(a));
            if far.is_none_or(|(_, best)| dist > best) {
                far = Some((i, dist));
            }
        }
        let Some((i, _)) = far else { break };
        counts[assignments[i]] -= 1;
        assignments[i] = empty;
        counts[empty] = 1;
        centroids.row_mut(empty).copy_from_slice(points.row(i));
        repaired = true;
    }
    if repaired {
        centroids = means(assignments).0;
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding. Stops once assignments repeat
/// or after `max_iters` update steps.
pub fn kmeans(points: &Matrix, k: usize, seed: u64, max_iters: usize) -> Result<ClusterModel> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > n {
        return Err(Error::InsufficientSamples(format!(
            "cannot form {k} clusters from {n} points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let (mut assignments, mut inertia) = assign_all(points, &centroids);
    let mut trace = vec![inertia];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        centroids = update_centroids(points, &mut assignments, k);
        let (next, next_inertia) = assign_all(points, &centroids);
        trace.push(next_inertia);
        inertia = next_inertia;
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Ok(ClusterModel {
        centroids,
        assignments,
        inertia,
        inertia_trace: trace,
        iterations,
    })
}

/// Mean silhouette coefficient. Points in singleton clusters score 0, as do
/// points with `a = b = 0`.
pub fn silhouette(points: &Matrix, assignments: &[usize]) -> Result<f64> {
    let n = points.rows();
    if assignments.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: assignments.len(),
        });
    }
    let mut labels: Vec<usize> = assignments.to_vec();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(Error::invalid("silhouette needs at least two clusters"));
    }
    let compact: Vec<usize> = assignments
        .iter()
        .map(|a| labels.binary_search(a).expect("label collected above"))
        .collect();
    let c = labels.len();
    let mut sizes = vec![0usize; c];
    for &a in &compact {
        sizes[a] += 1;
    }
    let scores: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = compact[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; c];
            for j in 0..n {
                if j != i {
                    sums[compact[j]] += distance(points.row(i), points.row(j));
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..c)
                .filter(|&q| q != own)
                .map(|q| sums[q] / sizes[q] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / n as f64)
}

/// Cluster-count search range `[2, min(10, floor(sqrt n), n - 1)]`, or `None` when empty.
pub fn default_k_range(n: usize) -> Option<(usize, usize)> {
    let hi = MAX_SILHOUETTE_K
        .min((n as f64).sqrt().floor() as usize)
        .min(n.saturating_sub(1));
    (hi >= 2).then_some((2, hi))
}

/// Runs k-means for every k in `k_min..=k_max` and returns the k with the
/// highest silhouette (smaller k on ties).
pub fn select_k(points: &Matrix, k_min: usize, k_max: usize, seed: u64) -> Result<usize> {
    let n = points.rows();
    if k_min < 2 || k_min > k_max || k_max + 1 > n {
        return Err(Error::invalid(format!(
            "invalid cluster range {k_min}..={k_max} for {n} points"
        )));
    }
    let mut best = (k_min, f64::NEG_INFINITY);
    for k in k_min..=k_max {
        let model = kmeans(points, k, seed, DEFAULT_MAX_ITERS)?;
        let score = silhouette(points, &model.assignments).unwrap_or(f64::NEG_INFINITY);
        tracing::trace!(k, score, "silhouette");
        if score > best.1 {
            best = (k, score);
        }
    }
    Ok(best.0)
}

/// The `l` points closest to `query`, skipping `exclude`. Ties go to the lower index.
pub fn nearest_neighbors(
    query: &[f64],
    points: &Matrix,
    l: usize,
    exclude: &[usize],
) -> Result<Vec<usize>> {
    let mut ranked: Vec<(f64, usize)> = (0..points.rows())
        .filter(|i| !exclude.contains(i))
        .map(|i| (squared_distance(query, points.row(i)), i))
        .collect();
    if ranked.len() < l {
        return Err(Error::InsufficientSamples(format!(
            "{l} neighbours requested, {} points available",
            ranked.len()
        )));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(l).map(|p| p.1).collect())
}
