//! K-means segmentation of per-point feature vectors.
//!
//! Points are processed in a canonical (lexicographic) order so the result
//! depends only on the point set, not on the input order: permuting the
//! input permutes the assignments and leaves the centroids unchanged.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub assignments: Vec<usize>,
    /// One row per cluster.
    pub centroids: Tensor2,
    pub k: usize,
    pub final_error: f64,
    pub iterations_run: usize,
    /// Clustering error after each centroid update.
    pub error_history: Vec<f64>,
}

impl ClusterSet {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum over clusters of squared distances from members to their centroid.
pub fn clustering_error(features: &Tensor2, assignments: &[usize], centroids: &Tensor2) -> Result<f64> {
    if assignments.len() != features.rows {
        return Err(Error::ShapeMismatch(format!(
            "{} assignments for {} points",
            assignments.len(),
            features.rows
        )));
    }
    if centroids.cols != features.cols {
        return Err(Error::ShapeMismatch(format!(
            "centroid dim {} vs feature dim {}",
            centroids.cols, features.cols
        )));
    }
    let mut total = 0.0;
    for (i, &a) in assignments.iter().enumerate() {
        if a >= centroids.rows {
            return Err(Error::ShapeMismatch(format!("assignment {a} out of range")));
        }
        total += sq_dist(features.row(i), centroids.row(a));
    }
    Ok(total)
}

fn nearest_centroid(x: &[f64], centroids: &Tensor2) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows {
        let d = sq_dist(x, centroids.row(c));
        // Strict comparison keeps the lowest index on ties.
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(x: &Tensor2, centroids: &Tensor2) -> Vec<usize> {
    (0..x.rows)
        .into_par_iter()
        .map(|i| nearest_centroid(x.row(i), centroids).0)
        .collect()
}

fn kmeans_pp_init(x: &Tensor2, k: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
    let n = x.rows;
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.gen_range(0..n));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    if target < w {
                        pick = Some(i);
                        break;
                    }
                    target -= w;
                }
            }
            // Rounding can run past the end; take the last positive weight.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // Every point coincides with a chosen center.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen.push(next);
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(x.row(i), x.row(next)));
        }
    }
    x.permute_rows(&chosen)
}

/// Recomputes centroids as member means. Empty clusters are re-seeded by
/// moving the point farthest from its centroid (from a cluster with more
/// than one member) into them.
fn update_centroids(x: &Tensor2, assignments: &mut [usize], centroids: &mut Tensor2) {
    let k = centroids.rows;
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, &a) in assignments.iter().enumerate() {
            if counts[a] < 2 {
                continue;
            }
            let d = sq_dist(x.row(i), centroids.row(a));
            if best.map_or(true, |(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("k <= n guarantees a donor cluster");
        counts[assignments[i]] -= 1;
        assignments[i] = empty;
        counts[empty] = 1;
    }

    let dim = x.cols;
    let mut sums = Tensor2::zeros(k, dim);
    for (i, &a) in assignments.iter().enumerate() {
        for (s, v) in sums.row_mut(a).iter_mut().zip(x.row(i)) {
            *s += v;
        }
    }
    for c in 0..k {
        let n = counts[c] as f64;
        for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
            *dst = s / n;
        }
    }
}

fn canonical_order(x: &Tensor2) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x.rows).collect();
    order.sort_by(|&a, &b| {
        x.row(a)
            .iter()
            .zip(x.row(b))
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Lloyd's k-means with k-means++ seeding. Deterministic in
/// `(features, k, seed, max_iter)`.
pub fn kmeans(features: &Tensor2, k: usize, seed: u64, max_iter: usize) -> Result<ClusterSet> {
    let n = features.rows;
    if k < 2 {
        return Err(Error::Config(format!("k must be >= 2, got {k}")));
    }
    if k > n {
        return Err(Error::TooFewPoints { k, n });
    }
    if max_iter == 0 {
        return Err(Error::Config("max_iter must be >= 1".into()));
    }
    if let Some(i) = (0..n).find(|&i| features.row(i).iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteFeature(i));
    }

    let order = canonical_order(features);
    let x = features.permute_rows(&order);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(&x, k, &mut rng);
    let mut assignments = assign(&x, &centroids);
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        update_centroids(&x, &mut assignments, &mut centroids);
        history.push(clustering_error(&x, &assignments, &centroids)?);
        let next = assign(&x, &centroids);
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
    }
    if !converged {
        // Make the centroids the means of the final assignments.
        update_centroids(&x, &mut assignments, &mut centroids);
        history.push(clustering_error(&x, &assignments, &centroids)?);
    }

    let mut original = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        original[i] = assignments[pos];
    }
    let final_error = clustering_error(features, &original, &centroids)?;
    Ok(ClusterSet {
        assignments: original,
        centroids,
        k,
        final_error,
        iterations_run: iterations,
        error_history: history,
    })
}

/// CSV dump: `point_index,cluster_index`.
pub fn clusters_to_csv(clusters: &ClusterSet) -> String {
    let mut out = String::from("point_index,cluster_index\n");
    for (i, a) in clusters.assignments.iter().enumerate() {
        out.push_str(&format!("{i},{a}\n"));
    }
    out
}
