#![allow(dead_code)]

use pcqa_core::graph::{build_channel_adjacency, PcwGraph, WeightMode, COLOR_CHANNELS, CURVATURE_CHANNELS, NODE_DIM, SALIENCY_CHANNELS, SPATIAL_CHANNELS};
use pcqa_core::clustering::ClusterSet;
use pcqa_core::features::{ChannelStats, FeatureScales, FeatureSet, FeatureWarnings};
use pcqa_core::io::PointCloud;
use pcqa_core::model::{Mode, ModelConfig, QualityModel};
use pcqa_core::nn::{Tape, Tensor2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor2 {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

/// Graph over `k` random nodes in [0,1]^8 with adjacencies built the same
/// way as for real clouds.
pub fn random_graph(k: usize, seed: u64) -> PcwGraph {
    let mut r = rng(seed);
    let data = (0..k * NODE_DIM).map(|_| r.gen::<f64>()).collect();
    let nodes = Tensor2::from_vec(k, NODE_DIM, data).unwrap();
    graph_from_nodes(nodes, 0.8, 0.3)
}

pub fn graph_from_nodes(nodes: Tensor2, radius: f64, alpha: f64) -> PcwGraph {
    let k = nodes.rows;
    let adj = |ch| build_channel_adjacency(&nodes, ch, SPATIAL_CHANNELS, radius, alpha, WeightMode::Product);
    let mut g = PcwGraph {
        k,
        adjacency_color: adj(COLOR_CHANNELS),
        adjacency_curvature: adj(CURVATURE_CHANNELS),
        adjacency_saliency: adj(SALIENCY_CHANNELS),
        node_features: nodes,
        cluster_radius: radius,
        alpha,
        isolated_nodes: Vec::new(),
    };
    g.isolated_nodes = (0..k)
        .filter(|&i| g.adjacencies().iter().all(|a| a.row(i).iter().all(|&v| v == 0.0)))
        .collect();
    g
}

/// Full layer and head counts with narrow widths.
pub fn narrow_config() -> ModelConfig {
    ModelConfig {
        d_k: 2,
        d_out: 8,
        gat_hidden: 4,
        ..ModelConfig::default()
    }
}

/// Sixteen random graphs whose targets are their mean node saliency,
/// min-max scaled to [0, 1].
pub fn overfit_dataset() -> (Vec<PcwGraph>, Vec<f64>) {
    let graphs: Vec<PcwGraph> = (0..16).map(|i| random_graph(8, 1000 + i)).collect();
    let raw: Vec<f64> = graphs
        .iter()
        .map(|g| (0..g.k).map(|r| g.node_features.get(r, SALIENCY_CHANNELS.start)).sum::<f64>() / g.k as f64)
        .collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let targets = raw.iter().map(|v| (v - lo) / (hi - lo)).collect();
    (graphs, targets)
}

pub type P3 = [f64; 3];

/// Eigenvalues of a symmetric 3x3 matrix by cyclic Jacobi rotations,
/// descending.
pub fn jacobi_eigenvalues(mut a: [[f64; 3]; 3]) -> [f64; 3] {
    for _ in 0..100 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        if off < 1e-40 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut b = a;
            for k in 0..3 {
                b[k][p] = c * a[k][p] - s * a[k][q];
                b[k][q] = s * a[k][p] + c * a[k][q];
            }
            let mut d = b;
            for k in 0..3 {
                d[p][k] = c * b[p][k] - s * b[q][k];
                d[q][k] = s * b[p][k] + c * b[q][k];
            }
            a = d;
        }
    }
    let mut e = [a[0][0], a[1][1], a[2][2]];
    e.sort_by(|x, y| y.total_cmp(x));
    e
}

pub fn covariance_of(points: &[P3]) -> [[f64; 3]; 3] {
    let n = points.len() as f64;
    let mut m = [0.0; 3];
    for p in points {
        for d in 0..3 {
            m[d] += p[d] / n;
        }
    }
    let mut c = [[0.0; 3]; 3];
    for p in points {
        for r in 0..3 {
            for s in 0..3 {
                c[r][s] += (p[r] - m[r]) * (p[s] - m[s]) / n;
            }
        }
    }
    c
}

/// Untruncated or truncated Gaussian-weighted mean by full scan.
pub fn brute_smooth(points: &[P3], sigma: f64, cutoff: Option<f64>) -> Vec<P3> {
    points
        .iter()
        .map(|p| {
            let (mut acc, mut w) = ([0.0; 3], 0.0);
            for q in points {
                let d2: f64 = (0..3).map(|d| (p[d] - q[d]).powi(2)).sum();
                if cutoff.map_or(false, |c| d2 > c * c) {
                    continue;
                }
                let wi = (-d2 / (2.0 * sigma * sigma)).exp();
                w += wi;
                for d in 0..3 {
                    acc[d] += wi * q[d];
                }
            }
            acc.map(|v| v / w)
        })
        .collect()
}

pub fn random_points(n: usize, seed: u64) -> Vec<P3> {
    let mut r = rng(seed);
    (0..n).map(|_| [r.gen::<f64>(), r.gen::<f64>(), r.gen::<f64>()]).collect()
}

/// Colored wavy sheet of `n` points; `distortion` in [0, 1] adds geometric
/// jitter and color noise.
pub fn synthetic_cloud(n: usize, seed: u64, distortion: f64) -> PointCloud {
    let mut r = rng(seed);
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for _ in 0..n {
        let (u, v): (f64, f64) = (r.gen(), r.gen());
        let z = 0.1 * (6.0 * u).sin() * (4.0 * v).cos();
        let j = distortion * 0.02;
        positions.push([u + j * r.gen_range(-1.0..1.0), v + j * r.gen_range(-1.0..1.0), z + j * r.gen_range(-1.0..1.0)]);
        let base = [200.0 * u + 20.0, 180.0 * v + 30.0, 120.0 + 400.0 * z];
        let noise = distortion * 60.0;
        colors.push(base.map(|c| (c + noise * r.gen_range(-1.0..1.0)).clamp(0.0, 255.0) as u8));
    }
    PointCloud::new(format!("synthetic-{seed}"), positions, Some(colors), None).unwrap()
}

/// Writes `refs * per_ref` binary PLY clouds plus `manifest.csv` into `dir`
/// and returns the manifest path. MOS falls linearly with distortion.
pub fn write_dataset(dir: &std::path::Path, refs: usize, per_ref: usize, points: usize) -> std::path::PathBuf {
    use pcqa_core::io::{write_ply, PlyFormat};
    let mut csv = String::from("cloud_path,reference_id,mos\n");
    for rf in 0..refs {
        for d in 0..per_ref {
            let distortion = d as f64 / per_ref.max(2).saturating_sub(1) as f64;
            let seed = (rf * 100 + d) as u64;
            let cloud = synthetic_cloud(points, seed, distortion);
            let name = format!("ref{rf}_d{d}.ply");
            std::fs::write(dir.join(&name), write_ply(&cloud, PlyFormat::BinaryLittleEndian)).unwrap();
            csv.push_str(&format!("{name},ref{rf},{}\n", 5.0 - 4.0 * distortion));
        }
    }
    let path = dir.join("manifest.csv");
    std::fs::write(&path, csv).unwrap();
    path
}

pub struct GradientCheck {
    pub worst: f64,
    pub entries: usize,
    /// Entries whose central difference at the nominal step straddled an
    /// activation kink and were re-measured with a smaller step.
    pub refined: usize,
}

fn score_with_pattern(model: &QualityModel, graph: &PcwGraph, mode: Mode) -> (f64, Vec<bool>) {
    let mut tape = Tape::new();
    let out = model.forward_on(&mut tape, graph, mode).unwrap();
    (tape.value(out.score).data[0], tape.activation_pattern())
}

/// Relative error between analytic and central-difference gradients of the
/// score over every parameter entry.
pub fn gradient_check(seed: u64) -> GradientCheck {
    let model = QualityModel::new(narrow_config(), seed).unwrap();
    let graph = random_graph(6, 100 + seed);
    let mode = Mode::Train { seed: 7 + seed };
    let mut tape = Tape::new();
    let out = model.forward_on(&mut tape, &graph, mode).unwrap();
    let grads = tape.backward_scalar(out.score).unwrap();
    let base = tape.activation_pattern();

    let mut probe = model.clone();
    let mut check = GradientCheck { worst: 0.0, entries: 0, refined: 0 };
    for p in 0..model.params.len() {
        let analytic = grads.param(p).unwrap();
        for j in 0..model.params.get(p).len() {
            let orig = model.params.get(p).data[j];
            let mut h = 1e-5;
            let numeric = loop {
                probe.params.get_mut(p).data[j] = orig + h;
                let (plus, pp) = score_with_pattern(&probe, &graph, mode);
                probe.params.get_mut(p).data[j] = orig - h;
                let (minus, pm) = score_with_pattern(&probe, &graph, mode);
                probe.params.get_mut(p).data[j] = orig;
                if (pp == base && pm == base) || h < 1e-8 {
                    break (plus - minus) / (2.0 * h);
                }
                if h == 1e-5 {
                    check.refined += 1;
                }
                h /= 10.0;
            };
            let a = analytic.data[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            check.worst = check.worst.max(rel);
            check.entries += 1;
        }
    }
    check
}


/// Six points in three clusters of two with hand-chosen channel values.
pub fn graph_fixture() -> (PointCloud, FeatureSet, ClusterSet) {
    let positions = vec![
        [0.0, 0.0, 0.0],
        [0.2, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [1.2, 0.0, 0.0],
        [4.0, 0.0, 0.0],
        [4.0, 0.2, 0.0],
    ];
    let cloud = PointCloud::from_positions("fixture", positions).unwrap();
    let lab = vec![
        [10.0, 0.0, 5.0],
        [30.0, 10.0, 5.0],
        [50.0, -10.0, 5.0],
        [50.0, 0.0, 5.0],
        [90.0, 20.0, 5.0],
        [70.0, 5.0, 6.0],
    ];
    let curvature = vec![0.0, 0.1, 0.2, 0.3, 0.05, 0.15];
    let saliency = vec![0.01, 0.03, 0.02, 0.02, 0.05, 0.01];
    let features = FeatureSet {
        lab,
        curvature,
        saliency,
        normals: vec![[0.0, 0.0, 1.0]; 6],
        stats: ChannelStats {
            min: [10.0, -10.0, 5.0, 0.0, 0.01],
            max: [90.0, 20.0, 6.0, 0.3, 0.05],
        },
        scales: FeatureScales {
            radius: 0.1,
            sigma1: 0.1,
            sigma2: 0.2,
        },
        warnings: FeatureWarnings::default(),
    };
    let clusters = ClusterSet {
        assignments: vec![0, 0, 1, 1, 2, 2],
        centroids: Tensor2::zeros(3, NODE_DIM),
        k: 3,
        final_error: 0.0,
        iterations_run: 1,
        error_history: vec![0.0],
    };
    (cloud, features, clusters)
}

