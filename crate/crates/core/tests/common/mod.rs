//! Slow, obviously-correct reference implementations used as test oracles.
#![allow(dead_code, clippy::too_many_arguments)]

use gbdtwm::data::{Dataset, Matrix};
use gbdtwm::gbdt::nll_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central finite difference of the summed NLL with respect to one raw score.
pub fn fd_gradient(labels: &[usize], scores: &Matrix, row: usize, class: usize, eps: f64) -> f64 {
    let mut plus = scores.clone();
    plus.row_mut(row)[class] += eps;
    let mut minus = scores.clone();
    minus.row_mut(row)[class] -= eps;
    (nll_loss(labels, &plus).unwrap() - nll_loss(labels, &minus).unwrap()) / (2.0 * eps)
}

/// Second central difference along the same coordinate.
pub fn fd_hessian(labels: &[usize], scores: &Matrix, row: usize, class: usize, eps: f64) -> f64 {
    let mut plus = scores.clone();
    plus.row_mut(row)[class] += eps;
    let mut minus = scores.clone();
    minus.row_mut(row)[class] -= eps;
    let f0 = nll_loss(labels, scores).unwrap();
    (nll_loss(labels, &plus).unwrap() - 2.0 * f0 + nll_loss(labels, &minus).unwrap()) / (eps * eps)
}

/// Gain of splitting `ids` on `x[f] <= thr`, summing each side directly.
/// `None` when a side is empty or below `min_child_hessian`.
pub fn direct_gain(
    ids: &[usize],
    g: &[f64],
    h: &[f64],
    x: &Matrix,
    f: usize,
    thr: f64,
    lambda: f64,
    min_child_hessian: f64,
) -> Option<f64> {
    let term = |gs: f64, hs: f64| {
        if hs + lambda > 0.0 {
            gs * gs / (hs + lambda)
        } else {
            0.0
        }
    };
    let (mut gl, mut hl, mut gr, mut hr) = (0.0, 0.0, 0.0, 0.0);
    let (mut nl, mut nr) = (0, 0);
    for &i in ids {
        if x.get(i, f) <= thr {
            gl += g[i];
            hl += h[i];
            nl += 1;
        } else {
            gr += g[i];
            hr += h[i];
            nr += 1;
        }
    }
    if nl == 0 || nr == 0 || hl < min_child_hessian || hr < min_child_hessian {
        return None;
    }
    Some(0.5 * (term(gl, hl) + term(gr, hr) - term(gl + gr, hl + hr)))
}

/// Every candidate threshold (midpoints of adjacent distinct values) of every
/// feature in `subset`, with its directly summed gain.
pub fn enumerate_splits(
    ids: &[usize],
    g: &[f64],
    h: &[f64],
    x: &Matrix,
    subset: &[usize],
    lambda: f64,
    min_child_hessian: f64,
) -> Vec<(usize, f64, f64)> {
    let mut out = Vec::new();
    for &f in subset {
        let mut vals: Vec<f64> = ids.iter().map(|&i| x.get(i, f)).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let thr = gbdtwm::gbdt::midpoint(w[0], w[1]);
            if let Some(gain) = direct_gain(ids, g, h, x, f, thr, lambda, min_child_hessian) {
                out.push((f, thr, gain));
            }
        }
    }
    out
}

/// Maximum gain over all enumerated candidates (0 when there are none).
pub fn exhaustive_best_gain(
    ids: &[usize],
    g: &[f64],
    h: &[f64],
    x: &Matrix,
    subset: &[usize],
    lambda: f64,
    min_child_hessian: f64,
) -> f64 {
    enumerate_splits(ids, g, h, x, subset, lambda, min_child_hessian)
        .iter()
        .map(|s| s.2)
        .fold(0.0, f64::max)
}

/// Mean silhouette from the full pairwise distance matrix.
pub fn brute_silhouette(points: &Matrix, labels: &[usize]) -> f64 {
    let n = points.rows();
    let dist = |i: usize, j: usize| -> f64 {
        points
            .row(i)
            .iter()
            .zip(points.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    let mut total = 0.0;
    for i in 0..n {
        let own: Vec<usize> = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        if own.is_empty() {
            continue;
        }
        let a = own.iter().map(|&j| dist(i, j)).sum::<f64>() / own.len() as f64;
        let mut b = f64::INFINITY;
        for &c in &clusters {
            if c == labels[i] {
                continue;
            }
            let other: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
            b = b.min(other.iter().map(|&j| dist(i, j)).sum::<f64>() / other.len() as f64);
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

/// All `k`-subsets of `0..n`.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

pub fn min_pairwise_distance(points: &[&[f64]], chosen: &[usize]) -> f64 {
    let mut best = f64::INFINITY;
    for (a, &i) in chosen.iter().enumerate() {
        for &j in &chosen[a + 1..] {
            let d = points[i]
                .iter()
                .zip(points[j])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Optimal max-min dispersion by exhaustive search.
pub fn optimal_dispersion(points: &[&[f64]], k: usize) -> f64 {
    subsets(points.len(), k)
        .iter()
        .map(|s| min_pairwise_distance(points, s))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Gaussian-ish blobs around `centers` (uniform jitter of half-width `spread`).
pub fn blobs(centers: &[Vec<f64>], per: usize, spread: f64, seed: u64) -> (Matrix, Vec<usize>) {
    let mut r = rng(seed);
    let d = centers[0].len();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per {
            for v in center {
                data.push(v + r.gen_range(-spread..spread));
            }
            labels.push(c);
        }
    }
    (Matrix::new(labels.len(), d, data).unwrap(), labels)
}

/// A labelled multiclass dataset with informative and noise features.
pub fn synthetic_dataset(n: usize, d: usize, k: usize, noise: f64, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % k;
        let row: Vec<f64> = (0..d)
            .map(|j| {
                let signal = if j % 2 == 0 {
                    (y as f64) * (1.0 + j as f64 * 0.1)
                } else {
                    0.0
                };
                signal + r.gen_range(-noise..noise)
            })
            .collect();
        rows.push(row);
        labels.push(y);
    }
    Dataset::from_rows(&rows, labels, d, k).unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Matrix {
    let mut r = rng(seed);
    let data = (0..rows * cols).map(|_| r.gen_range(lo..hi)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// Location of the bundled CSV files.
pub fn data_dir() -> std::path::PathBuf {
    match std::env::var_os("GBDTWM_DATA_DIR") {
        Some(p) => p.into(),
        None => std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"),
    }
}
