//! Perceptual clustering weighted graph.
//!
//! Nodes are clusters. Two clusters are connected when their spatial
//! centroids lie within `cluster_radius`; each perceptual channel group
//! (color, curvature, saliency) gets its own weight matrix
//! `W_ij = exp(-d_ij / (2 alpha^2)) * d_ij`, where `d_ij` is the Euclidean
//! distance between the two centroids restricted to that channel group.
//! The distance enters the exponent unsquared.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterSet;
use crate::error::{Error, Result};
use crate::features::{FeatureSet, PERCEPTUAL_CHANNELS};
use crate::io::{bounding_box, PointCloud};
use crate::nn::Tensor2;

pub const COLOR_CHANNELS: Range<usize> = 0..3;
pub const CURVATURE_CHANNELS: Range<usize> = 3..4;
pub const SALIENCY_CHANNELS: Range<usize> = 4..5;
pub const SPATIAL_CHANNELS: Range<usize> = 5..8;
/// Width of a node feature vector: five perceptual channels plus three
/// spatial coordinates.
pub const NODE_DIM: usize = 8;
/// Weight of the normalized spatial coordinates in the point feature vector.
pub const SPATIAL_WEIGHT: f64 = 0.5;
/// Bandwidth relative to the cluster radius.
pub const ALPHA_PER_RADIUS: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// Similarity times channel distance.
    Product,
    /// Similarity alone (ablation).
    SimilarityOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    /// Edge radius as a fraction of the bounding-box diagonal.
    pub cluster_radius_frac: f64,
    pub weight_mode: WeightMode,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            cluster_radius_frac: 0.35,
            weight_mode: WeightMode::Product,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cluster_radius_frac > 0.0 && self.cluster_radius_frac.is_finite()) {
            return Err(Error::Config("cluster_radius_frac must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcwGraph {
    pub k: usize,
    /// `k x NODE_DIM` cluster centroids in normalized feature units.
    pub node_features: Tensor2,
    pub adjacency_color: Tensor2,
    pub adjacency_curvature: Tensor2,
    pub adjacency_saliency: Tensor2,
    /// Model units.
    pub cluster_radius: f64,
    pub alpha: f64,
    /// Nodes with no nonzero weight in any channel.
    pub isolated_nodes: Vec<usize>,
}

impl PcwGraph {
    pub fn adjacencies(&self) -> [&Tensor2; 3] {
        [
            &self.adjacency_color,
            &self.adjacency_curvature,
            &self.adjacency_saliency,
        ]
    }

    /// Union of the channel supports plus self-loops, row-major `k x k`.
    pub fn attention_mask(&self) -> Vec<bool> {
        let k = self.k;
        let mut mask = vec![false; k * k];
        for i in 0..k {
            for j in 0..k {
                mask[i * k + j] =
                    i == j || self.adjacencies().iter().any(|a| a.get(i, j) != 0.0);
            }
        }
        mask
    }

    /// Relabels nodes: node `i` of the result is node `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> PcwGraph {
        let mut isolated: Vec<usize> = perm
            .iter()
            .enumerate()
            .filter(|(_, p)| self.isolated_nodes.contains(p))
            .map(|(i, _)| i)
            .collect();
        isolated.sort_unstable();
        PcwGraph {
            k: self.k,
            node_features: self.node_features.permute_rows(perm),
            adjacency_color: self.adjacency_color.conjugate(perm),
            adjacency_curvature: self.adjacency_curvature.conjugate(perm),
            adjacency_saliency: self.adjacency_saliency.conjugate(perm),
            cluster_radius: self.cluster_radius,
            alpha: self.alpha,
            isolated_nodes: isolated,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.node_features.shape() != (self.k, NODE_DIM) {
            return Err(Error::ShapeMismatch(format!(
                "node features {:?} for k = {}",
                self.node_features.shape(),
                self.k
            )));
        }
        for a in self.adjacencies() {
            if a.shape() != (self.k, self.k) {
                return Err(Error::ShapeMismatch("adjacency is not k x k".into()));
            }
        }
        Ok(())
    }

    /// Writes `header.json` and one CSV per adjacency into `dir`.
    pub fn write_dump(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = serde_json::json!({
            "k": self.k,
            "cluster_radius": self.cluster_radius,
            "alpha": self.alpha,
        });
        let path = dir.join("header.json");
        std::fs::write(&path, serde_json::to_string_pretty(&header)?)
            .map_err(|e| Error::io(&path, e))?;
        for (name, a) in ["color", "curvature", "saliency"].iter().zip(self.adjacencies()) {
            let path = dir.join(format!("adjacency_{name}.csv"));
            std::fs::write(&path, matrix_csv(a)).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join("node_features.csv");
        std::fs::write(&path, matrix_csv(&self.node_features)).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

fn matrix_csv(t: &Tensor2) -> String {
    let mut out = String::new();
    for r in 0..t.rows {
        let row: Vec<String> = t.row(r).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

/// Per-point vectors used for clustering and centroids: the five
/// normalized perceptual channels followed by spatial coordinates scaled
/// into the unit box (by the bounding-box diagonal) and weighted by
/// [`SPATIAL_WEIGHT`].
pub fn point_feature_matrix(features: &FeatureSet, cloud: &PointCloud) -> Tensor2 {
    let bb = bounding_box(cloud);
    let scale = if bb.diagonal > 0.0 { 1.0 / bb.diagonal } else { 0.0 };
    let perceptual = features.normalized();
    let mut out = Tensor2::zeros(cloud.len(), NODE_DIM);
    for (i, p) in cloud.positions.iter().enumerate() {
        let row = out.row_mut(i);
        row[..PERCEPTUAL_CHANNELS].copy_from_slice(&perceptual[i]);
        for d in 0..3 {
            row[PERCEPTUAL_CHANNELS + d] = SPATIAL_WEIGHT * (p[d] - bb.min_corner[d]) * scale;
        }
    }
    out
}

/// Mean feature vector of each cluster.
pub fn cluster_centroids(features: &Tensor2, clusters: &ClusterSet) -> Result<Tensor2> {
    if clusters.assignments.len() != features.rows {
        return Err(Error::ShapeMismatch(format!(
            "{} assignments for {} points",
            clusters.assignments.len(),
            features.rows
        )));
    }
    let mut sums = Tensor2::zeros(clusters.k, features.cols);
    let mut counts = vec![0usize; clusters.k];
    for (i, &a) in clusters.assignments.iter().enumerate() {
        if a >= clusters.k {
            return Err(Error::ShapeMismatch(format!("cluster index {a} >= k")));
        }
        counts[a] += 1;
        for (s, v) in sums.row_mut(a).iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::EmptyCluster(c));
        }
        for s in sums.row_mut(c) {
            *s /= n as f64;
        }
    }
    Ok(sums)
}

/// RBF similarity with the distance unsquared: `exp(-d / (2 alpha^2))`.
pub fn rbf_similarity(distance: f64, alpha: f64) -> f64 {
    (-distance / (2.0 * alpha * alpha)).exp()
}

fn slice_distance(a: &[f64], b: &[f64], range: &Range<usize>) -> f64 {
    range
        .clone()
        .map(|c| (a[c] - b[c]) * (a[c] - b[c]))
        .sum::<f64>()
        .sqrt()
}

/// One channel's weight matrix. `centroids` must carry spatial columns in
/// the same units as `cluster_radius`.
pub fn build_channel_adjacency(
    centroids: &Tensor2,
    channel: Range<usize>,
    spatial: Range<usize>,
    cluster_radius: f64,
    alpha: f64,
    mode: WeightMode,
) -> Tensor2 {
    let k = centroids.rows;
    let mut w = Tensor2::zeros(k, k);
    for i in 0..k {
        for j in (i + 1)..k {
            let (a, b) = (centroids.row(i), centroids.row(j));
            if slice_distance(a, b, &spatial) > cluster_radius {
                continue;
            }
            let d = slice_distance(a, b, &channel);
            let sim = rbf_similarity(d, alpha);
            let v = match mode {
                WeightMode::Product => sim * d,
                WeightMode::SimilarityOnly => sim,
            };
            w.set(i, j, v);
            w.set(j, i, v);
        }
    }
    w
}

/// Builds the graph from per-point features and a clustering of them.
pub fn build_pcw_graph(
    features: &FeatureSet,
    cloud: &PointCloud,
    clusters: &ClusterSet,
    config: &GraphConfig,
) -> Result<PcwGraph> {
    config.validate()?;
    let points = point_feature_matrix(features, cloud);
    let node_features = cluster_centroids(&points, clusters)?;

    // Same centroids, but spatial columns as raw positions (model units)
    // for the radius test.
    let positions = Tensor2::from_rows(&cloud.positions)?;
    let spatial = cluster_centroids(&positions, clusters)?;
    let mut geometry = node_features.clone();
    for c in 0..clusters.k {
        geometry.row_mut(c)[SPATIAL_CHANNELS].copy_from_slice(spatial.row(c));
    }

    let cluster_radius = config.cluster_radius_frac * bounding_box(cloud).diagonal;
    let alpha = ALPHA_PER_RADIUS * cluster_radius;
    let channel = |range: Range<usize>| {
        build_channel_adjacency(
            &geometry,
            range,
            SPATIAL_CHANNELS,
            cluster_radius,
            alpha,
            config.weight_mode,
        )
    };
    let mut graph = PcwGraph {
        k: clusters.k,
        node_features,
        adjacency_color: channel(COLOR_CHANNELS),
        adjacency_curvature: channel(CURVATURE_CHANNELS),
        adjacency_saliency: channel(SALIENCY_CHANNELS),
        cluster_radius,
        alpha,
        isolated_nodes: Vec::new(),
    };
    graph.isolated_nodes = (0..graph.k)
        .filter(|&i| {
            graph
                .adjacencies()
                .iter()
                .all(|a| a.row(i).iter().all(|&v| v == 0.0))
        })
        .collect();
    if !graph.isolated_nodes.is_empty() {
        log::warn!(
            "{}: disconnected graph, {} of {} nodes have no edges",
            cloud.name,
            graph.isolated_nodes.len(),
            graph.k
        );
    }
    Ok(graph)
}
