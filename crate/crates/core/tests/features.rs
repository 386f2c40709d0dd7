mod common;

use common::{brute_smooth, covariance_of, jacobi_eigenvalues, random_points, P3};
use pcqa_core::features::{
    estimate_normals, extract_features, gaussian_smooth, point_curvature, point_saliency, radius_neighbors,
    saliency_indexed, FeatureConfig, IndexedCloud,
};
use pcqa_core::io::PointCloud;
use proptest::prelude::*;
use rand::Rng;

fn cloud(points: Vec<P3>) -> PointCloud {
    PointCloud::from_positions("test", points).unwrap()
}

#[test]
fn planar_neighborhoods_have_zero_curvature() {
    let mut r = common::rng(1);
    for _ in 0..50 {
        let pts: Vec<P3> = (0..40).map(|_| [r.gen::<f64>(), r.gen::<f64>(), 0.0]).collect();
        let c = cloud(pts);
        for i in 0..5 {
            assert!(point_curvature(&c, i, 0.5) < 1e-9);
        }
    }
}

#[test]
fn isotropic_star_has_curvature_one_third() {
    let pts = vec![
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
    ];
    let k = point_curvature(&cloud(pts), 0, 1.0);
    assert!((k - 1.0 / 3.0).abs() < 1e-9, "{k}");
}

#[test]
fn curvature_matches_jacobi_oracle() {
    let mut r = common::rng(2);
    for case in 0..1000 {
        // Anisotropic blob so the eigenvalues are spread.
        let scale = [r.gen_range(0.1..2.0), r.gen_range(0.1..2.0), r.gen_range(0.01..2.0)];
        let pts: Vec<P3> = (0..30)
            .map(|_| std::array::from_fn(|d| r.gen_range(-1.0..1.0) * scale[d]))
            .collect();
        let e = jacobi_eigenvalues(covariance_of(&pts));
        let want = e[2].max(0.0) / e.iter().map(|v| v.max(0.0)).sum::<f64>();
        let got = point_curvature(&cloud(pts), 0, 100.0);
        assert!((got - want).abs() < 1e-9, "case {case}: {got} vs {want}");
    }
}

#[test]
fn tiny_neighborhoods_have_zero_curvature() {
    let c = cloud(vec![[0.0; 3], [1.0, 0.0, 0.0], [5.0, 5.0, 5.0]]);
    assert_eq!(point_curvature(&c, 0, 1.5), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn radius_neighbors_equal_brute_force(
        n in 1usize..=500,
        seed in any::<u64>(),
        frac in 0.0f64..1.2,
    ) {
        let pts = random_points(n, seed);
        let c = cloud(pts.clone());
        let diag = 3f64.sqrt();
        let radius = frac * diag;
        for q in (0..n).step_by((n / 7).max(1)) {
            let want: Vec<usize> = (0..n)
                .filter(|&j| (0..3).map(|d| (pts[j][d] - pts[q][d]).powi(2)).sum::<f64>().sqrt() <= radius)
                .collect();
            prop_assert_eq!(radius_neighbors(&c, q, radius), want);
        }
    }
}

#[test]
fn radius_neighbor_edge_cases() {
    let pts = random_points(200, 9);
    let c = cloud(pts);
    assert_eq!(radius_neighbors(&c, 3, 1e-9), vec![3]);
    assert_eq!(radius_neighbors(&c, 3, 3f64.sqrt()).len(), 200);
}

#[test]
fn plane_normals_are_vertical() {
    let mut pts = Vec::new();
    for i in 0..20 {
        for j in 0..20 {
            pts.push([i as f64 * 0.05, j as f64 * 0.05, 0.0]);
        }
    }
    let est = estimate_normals(&cloud(pts), &FeatureConfig::default());
    let first = est.normals[0][2];
    assert!((first.abs() - 1.0).abs() < 1e-12);
    for n in &est.normals {
        assert!((n[2] - first).abs() < 1e-12 && n[0].abs() < 1e-12 && n[1].abs() < 1e-12);
    }
}

#[test]
fn sphere_normals_are_radial() {
    let n = 2000;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let pts: Vec<P3> = (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let t = golden * i as f64;
            [r * t.cos(), y, r * t.sin()]
        })
        .collect();
    let config = FeatureConfig {
        neighbor_radius_frac: 0.05,
        ..FeatureConfig::default()
    };
    let est = estimate_normals(&cloud(pts.clone()), &config);
    let good = pts
        .iter()
        .zip(&est.normals)
        .filter(|(p, nrm)| {
            let cos: f64 = (0..3).map(|d| p[d] * nrm[d]).sum();
            cos.clamp(-1.0, 1.0).acos().to_degrees() < 5.0
        })
        .count();
    assert!(good as f64 >= 0.99 * n as f64, "{good} of {n}");
}

#[test]
fn coincident_points_fall_back() {
    let est = estimate_normals(&cloud(vec![[1.0, 2.0, 3.0]; 3]), &FeatureConfig::default());
    assert_eq!(est.degenerate, 3);
    assert!(est.normals.iter().all(|n| *n == [0.0, 0.0, 1.0]));
}

#[test]
fn smoothing_limits() {
    let single = gaussian_smooth(&cloud(vec![[0.3, -2.0, 5.0]]), 0.1);
    assert_eq!(single, vec![[0.3, -2.0, 5.0]]);
    let pts = random_points(100, 4);
    let diag = 3f64.sqrt();
    for (g, p) in gaussian_smooth(&cloud(pts.clone()), 1e-9 * diag).iter().zip(&pts) {
        assert!((0..3).all(|d| (g[d] - p[d]).abs() < 1e-9));
    }
}

#[test]
fn smoothing_matches_truncated_kernel_and_bounds_full_kernel() {
    let pts = random_points(50, 5);
    let c = cloud(pts.clone());
    let diag = pcqa_core::io::bounding_box(&c).diagonal;
    let sigma = 0.2 * diag;
    let got = gaussian_smooth(&c, sigma);
    let truncated = brute_smooth(&pts, sigma, Some(3.0 * sigma));
    let full = brute_smooth(&pts, sigma, None);
    for i in 0..pts.len() {
        // The full-kernel mean is a convex mix of the truncated mean and the
        // discarded points, so they differ by at most the discarded weight
        // fraction times the cloud diameter.
        let (mut far, mut all) = (0.0, 0.0);
        for q in &pts {
            let d2: f64 = (0..3).map(|d| (pts[i][d] - q[d]).powi(2)).sum();
            let w = (-d2 / (2.0 * sigma * sigma)).exp();
            all += w;
            if d2 > 9.0 * sigma * sigma {
                far += w;
            }
        }
        let dev: f64 = (0..3).map(|d| (got[i][d] - full[i][d]).powi(2)).sum::<f64>().sqrt();
        assert!(dev <= far / all * diag + 1e-12);
        assert!((0..3).all(|d| (got[i][d] - truncated[i][d]).abs() < 1e-12 * diag));
    }
}

#[test]
fn smoothing_is_translation_equivariant() {
    let pts = random_points(300, 6);
    let shift = [10.5, -3.25, 7.0];
    let moved: Vec<P3> = pts.iter().map(|p| std::array::from_fn(|d| p[d] + shift[d])).collect();
    let a = gaussian_smooth(&cloud(pts), 0.05);
    let b = gaussian_smooth(&cloud(moved), 0.05);
    for (x, y) in a.iter().zip(&b) {
        assert!((0..3).all(|d| (x[d] + shift[d] - y[d]).abs() < 1e-9));
    }
}

#[test]
fn saliency_matches_composition_oracle() {
    let pts = random_points(400, 7);
    let c = cloud(pts.clone());
    let config = FeatureConfig {
        sigma1: Some(0.04),
        sigma2: Some(0.08),
        ..FeatureConfig::default()
    };
    let normals = estimate_normals(&c, &config).normals;
    let got = point_saliency(&c, &normals, &config);
    let g1 = brute_smooth(&pts, 0.04, Some(0.12));
    let g2 = brute_smooth(&pts, 0.08, Some(0.24));
    for i in 0..pts.len() {
        let want = (0..3).map(|d| normals[i][d] * (g1[i][d] - g2[i][d])).sum::<f64>().abs();
        assert!((got[i] - want).abs() < 1e-9);
        assert!(got[i] >= 0.0);
    }
}

#[test]
fn equal_scales_give_zero_saliency() {
    let c = cloud(random_points(200, 8));
    let normals = estimate_normals(&c, &FeatureConfig::default()).normals;
    let sal = saliency_indexed(&IndexedCloud::new(&c), &normals, 0.05, 0.05);
    assert!(sal.iter().all(|&s| s == 0.0));
}

#[test]
fn flat_grid_interior_has_zero_saliency() {
    let mut pts = Vec::new();
    for i in 0..30 {
        for j in 0..30 {
            pts.push([i as f64 * 0.1, j as f64 * 0.1, 2.0]);
        }
    }
    let c = cloud(pts.clone());
    let normals = vec![[0.0, 0.0, 1.0]; pts.len()];
    let config = FeatureConfig {
        sigma1: Some(0.1),
        sigma2: Some(0.2),
        ..FeatureConfig::default()
    };
    let sal = point_saliency(&c, &normals, &config);
    assert!(sal.iter().all(|&s| s < 1e-12));
}

fn rotate(p: P3, r: &[[f64; 3]; 3]) -> P3 {
    std::array::from_fn(|i| (0..3).map(|j| r[i][j] * p[j]).sum())
}

#[test]
fn saliency_is_rigid_motion_invariant() {
    let pts = random_points(500, 10);
    let c = cloud(pts.clone());
    let config = FeatureConfig {
        sigma1: Some(0.05),
        sigma2: Some(0.1),
        ..FeatureConfig::default()
    };
    let normals = estimate_normals(&c, &config).normals;
    let base = point_saliency(&c, &normals, &config);
    let (a, b) = (0.7f64, -1.1f64);
    let rz = [[a.cos(), -a.sin(), 0.0], [a.sin(), a.cos(), 0.0], [0.0, 0.0, 1.0]];
    let rx = [[1.0, 0.0, 0.0], [0.0, b.cos(), -b.sin()], [0.0, b.sin(), b.cos()]];
    let shift = [4.0, -2.0, 9.5];
    let moved: Vec<P3> = pts
        .iter()
        .map(|p| {
            let q = rotate(rotate(*p, &rz), &rx);
            std::array::from_fn(|d| q[d] + shift[d])
        })
        .collect();
    let moved_normals: Vec<P3> = normals.iter().map(|n| rotate(rotate(*n, &rz), &rx)).collect();
    let after = point_saliency(&cloud(moved), &moved_normals, &config);
    for (x, y) in base.iter().zip(&after) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn extracted_channels_have_cloud_length_and_range() {
    let mut r = common::rng(11);
    let pts = random_points(1000, 11);
    let colors: Vec<[u8; 3]> = (0..1000).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
    let c = PointCloud::new("colored", pts, Some(colors), None).unwrap();
    let f = extract_features(&c, &FeatureConfig::default()).unwrap();
    assert_eq!((f.lab.len(), f.curvature.len(), f.saliency.len(), f.normals.len()), (1000, 1000, 1000, 1000));
    assert!(f.curvature.iter().all(|&k| (0.0..=1.0 / 3.0 + 1e-12).contains(&k)));
    assert!(f.saliency.iter().all(|&s| s >= 0.0));
    assert!(f.lab.iter().all(|l| (0.0..=100.0).contains(&l[0])));
    assert!(!f.warnings.missing_color);
}

#[test]
fn colorless_and_constant_color_clouds() {
    let pts = random_points(300, 12);
    let f = extract_features(&cloud(pts.clone()), &FeatureConfig::default()).unwrap();
    assert!(f.warnings.missing_color);
    assert!(f.lab.iter().all(|l| *l == [50.0, 0.0, 0.0]));

    let c = PointCloud::new("gray", pts, Some(vec![[90, 120, 30]; 300]), None).unwrap();
    let f = extract_features(&c, &FeatureConfig::default()).unwrap();
    for row in f.normalized() {
        assert_eq!(&row[..3], &[0.0, 0.0, 0.0]);
    }
}
