//! Per-point perceptual features: CIELAB color, covariance curvature and
//! two-scale Gaussian saliency, plus the normals saliency needs.

mod color;
pub mod eigen;
mod spatial;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use color::rgb_to_lab;
pub use eigen::EigenTriple;
pub use spatial::KdTree;

use crate::error::{Error, Result};
use crate::io::{bounding_box, dot, sub, Point3, PointCloud};

/// Number of perceptual channels: L, a, b, curvature, saliency.
pub const PERCEPTUAL_CHANNELS: usize = 5;

const MISSING_COLOR_LAB: [f64; 3] = [50.0, 0.0, 0.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Neighborhood radius as a fraction of the bounding-box diagonal.
    pub neighbor_radius_frac: f64,
    /// Fine smoothing scale in model units; `None` derives it from point
    /// spacing (2x the mean nearest-neighbor distance).
    pub sigma1: Option<f64>,
    /// Coarse smoothing scale; `None` means `2 * sigma1`.
    pub sigma2: Option<f64>,
    /// Neighbors used for normals when the radius ball holds fewer than 4.
    pub knn_fallback: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            neighbor_radius_frac: 0.02,
            sigma1: None,
            sigma2: None,
            knn_fallback: 16,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.neighbor_radius_frac > 0.0 && self.neighbor_radius_frac < 1.0) {
            return Err(Error::Config("neighbor_radius_frac must be in (0, 1)".into()));
        }
        if self.knn_fallback < 4 {
            return Err(Error::Config("knn_fallback must be >= 4".into()));
        }
        if let Some(s1) = self.sigma1 {
            if !(s1 > 0.0 && s1.is_finite()) {
                return Err(Error::Config("sigma1 must be positive".into()));
            }
        }
        if let Some(s2) = self.sigma2 {
            if !(s2 > 0.0 && s2.is_finite()) {
                return Err(Error::Config("sigma2 must be positive".into()));
            }
            if self.sigma1.is_none() {
                return Err(Error::Config("sigma2 given without sigma1".into()));
            }
        }
        if let (Some(s1), Some(s2)) = (self.sigma1, self.sigma2) {
            if s1 >= s2 {
                return Err(Error::Config("sigma1 must be smaller than sigma2".into()));
            }
        }
        Ok(())
    }
}

/// Concrete radii for one cloud.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScales {
    pub radius: f64,
    pub sigma1: f64,
    pub sigma2: f64,
}

/// A cloud plus its spatial index.
pub struct IndexedCloud<'a> {
    pub cloud: &'a PointCloud,
    pub tree: KdTree,
    pub diagonal: f64,
}

impl<'a> IndexedCloud<'a> {
    pub fn new(cloud: &'a PointCloud) -> Self {
        IndexedCloud {
            cloud,
            tree: KdTree::build(&cloud.positions),
            diagonal: bounding_box(cloud).diagonal,
        }
    }

    pub fn mean_nearest_distance(&self) -> f64 {
        let n = self.cloud.len();
        if n < 2 {
            return 0.0;
        }
        let dists: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let p = self.cloud.positions[i];
                self.tree
                    .nearest(p, 2)
                    .into_iter()
                    .find(|&(j, _)| j != i)
                    .map_or(0.0, |(_, d2)| d2.sqrt())
            })
            .collect();
        dists.iter().sum::<f64>() / n as f64
    }

    pub fn scales(&self, config: &FeatureConfig) -> FeatureScales {
        let radius = config.neighbor_radius_frac * self.diagonal;
        let sigma1 = config.sigma1.unwrap_or_else(|| {
            let s = 2.0 * self.mean_nearest_distance();
            if s > 0.0 {
                s
            } else if self.diagonal > 0.0 {
                1e-3 * self.diagonal
            } else {
                1.0
            }
        });
        let sigma2 = config.sigma2.unwrap_or(2.0 * sigma1);
        FeatureScales {
            radius: if radius > 0.0 { radius } else { f64::MIN_POSITIVE },
            sigma1,
            sigma2,
        }
    }

    pub fn radius_neighbors(&self, index: usize, radius: f64) -> Vec<usize> {
        self.tree.within_radius(self.cloud.positions[index], radius)
    }
}

/// Indices `j` with `|p_j - p_query| <= radius`, including the query.
pub fn radius_neighbors(cloud: &PointCloud, query_index: usize, radius: f64) -> Vec<usize> {
    IndexedCloud::new(cloud).radius_neighbors(query_index, radius)
}

/// Neighborhood covariance: centroid-centered outer products averaged over
/// the neighborhood size.
pub fn covariance(points: &[Point3], neighbors: &[usize]) -> eigen::Sym3 {
    let n = neighbors.len() as f64;
    let mut mean = [0.0; 3];
    for &j in neighbors {
        for d in 0..3 {
            mean[d] += points[j][d];
        }
    }
    mean = mean.map(|m| m / n);
    let mut c = [[0.0; 3]; 3];
    for &j in neighbors {
        let v = sub(points[j], mean);
        for r in 0..3 {
            for s in r..3 {
                c[r][s] += v[r] * v[s];
            }
        }
    }
    for r in 0..3 {
        for s in r..3 {
            c[r][s] /= n;
            c[s][r] = c[r][s];
        }
    }
    c
}

fn curvature_of(points: &[Point3], neighbors: &[usize]) -> f64 {
    if neighbors.len() < 3 {
        return 0.0;
    }
    let e = eigen::eigenvalues(&covariance(points, neighbors));
    let total = e.sum();
    if total < 1e-12 {
        0.0
    } else {
        e.lambda3 / total
    }
}

/// Eigenvalue-ratio curvature over the radius neighborhood of one point.
pub fn point_curvature(cloud: &PointCloud, index: usize, radius: f64) -> f64 {
    let indexed = IndexedCloud::new(cloud);
    curvature_of(&cloud.positions, &indexed.radius_neighbors(index, radius))
}

/// Curvature of every point using a shared index.
pub fn curvatures(indexed: &IndexedCloud<'_>, radius: f64) -> Vec<f64> {
    let pts = &indexed.cloud.positions;
    (0..pts.len())
        .into_par_iter()
        .map(|i| curvature_of(pts, &indexed.radius_neighbors(i, radius)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalEstimate {
    pub normals: Vec<Point3>,
    /// Points whose neighbors all coincided; they get (0, 0, 1).
    pub degenerate: usize,
}

fn centroid(points: &[Point3]) -> Point3 {
    let mut c = [0.0; 3];
    for p in points {
        for d in 0..3 {
            c[d] += p[d];
        }
    }
    c.map(|v| v / points.len() as f64)
}

/// Covariance normals, oriented away from the cloud centroid.
pub fn estimate_normals(cloud: &PointCloud, config: &FeatureConfig) -> NormalEstimate {
    let indexed = IndexedCloud::new(cloud);
    let radius = indexed.scales(config).radius;
    estimate_normals_indexed(&indexed, radius, config.knn_fallback)
}

pub fn estimate_normals_indexed(
    indexed: &IndexedCloud<'_>,
    radius: f64,
    knn_fallback: usize,
) -> NormalEstimate {
    let pts = &indexed.cloud.positions;
    let center = centroid(pts);
    let tol = (1e-12 * indexed.diagonal).powi(2);
    let results: Vec<Option<Point3>> = (0..pts.len())
        .into_par_iter()
        .map(|i| {
            let mut nb = indexed.radius_neighbors(i, radius);
            if nb.len() < 4 {
                nb = indexed
                    .tree
                    .nearest(pts[i], knn_fallback)
                    .into_iter()
                    .map(|(j, _)| j)
                    .collect();
            }
            if nb.iter().all(|&j| pts[j] == pts[nb[0]]) {
                return None;
            }
            let c = covariance(pts, &nb);
            if c[0][0] + c[1][1] + c[2][2] <= tol {
                return None;
            }
            let mut n = eigen::smallest_eigenvector(&c)?;
            if dot(n, sub(pts[i], center)) < 0.0 {
                n = n.map(|v| -v);
            }
            Some(n)
        })
        .collect();
    let degenerate = results.iter().filter(|r| r.is_none()).count();
    if degenerate > 0 {
        log::warn!(
            "{}: {degenerate} points with degenerate neighborhoods, normal set to (0,0,1)",
            indexed.cloud.name
        );
    }
    NormalEstimate {
        normals: results
            .into_iter()
            .map(|r| r.unwrap_or([0.0, 0.0, 1.0]))
            .collect(),
        degenerate,
    }
}

/// Gaussian-weighted mean position, kernel truncated at 3 sigma.
pub fn gaussian_smooth(cloud: &PointCloud, sigma: f64) -> Vec<Point3> {
    gaussian_smooth_indexed(&IndexedCloud::new(cloud), sigma)
}

pub fn gaussian_smooth_indexed(indexed: &IndexedCloud<'_>, sigma: f64) -> Vec<Point3> {
    let pts = &indexed.cloud.positions;
    let inv = 1.0 / (2.0 * sigma * sigma);
    (0..pts.len())
        .into_par_iter()
        .map(|i| {
            let p = pts[i];
            let mut nb: Vec<(usize, f64)> = Vec::new();
            indexed
                .tree
                .for_each_within(p, 3.0 * sigma, |j, d2| nb.push((j, d2)));
            // Fixed summation order, independent of tree layout.
            nb.sort_unstable_by_key(|&(j, _)| j);
            let mut acc = [0.0; 3];
            let mut wsum = 0.0;
            for (j, d2) in nb {
                let w = (-d2 * inv).exp();
                wsum += w;
                for d in 0..3 {
                    acc[d] += w * pts[j][d];
                }
            }
            acc.map(|v| v / wsum)
        })
        .collect()
}

/// Saliency `|n_i . (g1(p_i) - g2(p_i))|` from two smoothing scales.
pub fn point_saliency(cloud: &PointCloud, normals: &[Point3], config: &FeatureConfig) -> Vec<f64> {
    let indexed = IndexedCloud::new(cloud);
    let scales = indexed.scales(config);
    saliency_indexed(&indexed, normals, scales.sigma1, scales.sigma2)
}

pub fn saliency_indexed(
    indexed: &IndexedCloud<'_>,
    normals: &[Point3],
    sigma1: f64,
    sigma2: f64,
) -> Vec<f64> {
    let g1 = gaussian_smooth_indexed(indexed, sigma1);
    let g2 = gaussian_smooth_indexed(indexed, sigma2);
    normals
        .iter()
        .zip(g1.iter().zip(&g2))
        .map(|(n, (a, b))| dot(*n, sub(*a, *b)).abs())
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureWarnings {
    pub missing_color: bool,
    pub degenerate_normals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub min: [f64; PERCEPTUAL_CHANNELS],
    pub max: [f64; PERCEPTUAL_CHANNELS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub lab: Vec<[f64; 3]>,
    pub curvature: Vec<f64>,
    pub saliency: Vec<f64>,
    pub normals: Vec<Point3>,
    pub stats: ChannelStats,
    pub scales: FeatureScales,
    pub warnings: FeatureWarnings,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.curvature.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curvature.is_empty()
    }

    fn raw(&self, i: usize) -> [f64; PERCEPTUAL_CHANNELS] {
        let [l, a, b] = self.lab[i];
        [l, a, b, self.curvature[i], self.saliency[i]]
    }

    /// Channels min/max-normalized to [0, 1]; constant channels map to 0.
    pub fn normalized(&self) -> Vec<[f64; PERCEPTUAL_CHANNELS]> {
        (0..self.len())
            .map(|i| {
                let raw = self.raw(i);
                std::array::from_fn(|c| {
                    let span = self.stats.max[c] - self.stats.min[c];
                    if span > 0.0 {
                        (raw[c] - self.stats.min[c]) / span
                    } else {
                        0.0
                    }
                })
            })
            .collect()
    }

    /// CSV dump: `index,L,a,b,curvature,saliency,nx,ny,nz`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,L,a,b,curvature,saliency,nx,ny,nz\n");
        for i in 0..self.len() {
            let [l, a, b] = self.lab[i];
            let [nx, ny, nz] = self.normals[i];
            let _ = writeln!(
                out,
                "{i},{l},{a},{b},{},{},{nx},{ny},{nz}",
                self.curvature[i], self.saliency[i]
            );
        }
        out
    }
}

fn channel_stats(lab: &[[f64; 3]], curvature: &[f64], saliency: &[f64]) -> ChannelStats {
    let mut min = [f64::INFINITY; PERCEPTUAL_CHANNELS];
    let mut max = [f64::NEG_INFINITY; PERCEPTUAL_CHANNELS];
    for i in 0..curvature.len() {
        let v = [lab[i][0], lab[i][1], lab[i][2], curvature[i], saliency[i]];
        for c in 0..PERCEPTUAL_CHANNELS {
            min[c] = min[c].min(v[c]);
            max[c] = max[c].max(v[c]);
        }
    }
    ChannelStats { min, max }
}

/// Full per-point feature extraction.
pub fn extract_features(cloud: &PointCloud, config: &FeatureConfig) -> Result<FeatureSet> {
    config.validate()?;
    cloud.validate()?;
    let indexed = IndexedCloud::new(cloud);
    let scales = indexed.scales(config);
    if scales.sigma1 >= scales.sigma2 {
        return Err(Error::Config(format!(
            "sigma1 ({}) must be smaller than sigma2 ({})",
            scales.sigma1, scales.sigma2
        )));
    }

    let mut warnings = FeatureWarnings::default();
    let lab: Vec<[f64; 3]> = match &cloud.colors {
        Some(colors) => colors.par_iter().map(|&c| rgb_to_lab(c)).collect(),
        None => {
            log::warn!("{}: no colors, using constant L*a*b* (50, 0, 0)", cloud.name);
            warnings.missing_color = true;
            vec![MISSING_COLOR_LAB; cloud.len()]
        }
    };
    let curvature = curvatures(&indexed, scales.radius);
    let normals = estimate_normals_indexed(&indexed, scales.radius, config.knn_fallback);
    warnings.degenerate_normals = normals.degenerate;
    let saliency = saliency_indexed(&indexed, &normals.normals, scales.sigma1, scales.sigma2);
    let stats = channel_stats(&lab, &curvature, &saliency);

    Ok(FeatureSet {
        lab,
        curvature,
        saliency,
        normals: normals.normals,
        stats,
        scales,
        warnings,
    })
}
