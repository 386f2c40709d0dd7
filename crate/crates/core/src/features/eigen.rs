//! Symmetric 3x3 eigen-decomposition.
//!
//! Eigenvalues come from the closed-form trigonometric solution of the
//! characteristic polynomial. When two eigenvalues nearly coincide the
//! `acos` step loses precision, and a cyclic Jacobi sweep is used instead.

use serde::{Deserialize, Serialize};

use crate::io::Point3;

pub type Sym3 = [[f64; 3]; 3];

/// Eigenvalues in descending order, clamped at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenTriple {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl EigenTriple {
    fn from_unsorted(mut v: [f64; 3]) -> Self {
        v.sort_by(|a, b| b.total_cmp(a));
        let clamp = |x: f64| if x < 0.0 { 0.0 } else { x };
        EigenTriple {
            lambda1: clamp(v[0]),
            lambda2: clamp(v[1]),
            lambda3: clamp(v[2]),
        }
    }

    pub fn sum(&self) -> f64 {
        self.lambda1 + self.lambda2 + self.lambda3
    }
}

// 1 - r^2 below this means a near-repeated root; acos would cost ~8 digits.
const NEAR_DEGENERATE: f64 = 1e-6;

pub fn eigenvalues(c: &Sym3) -> EigenTriple {
    match closed_form(c) {
        Some(v) => EigenTriple::from_unsorted(v),
        None => EigenTriple::from_unsorted(jacobi(c).0),
    }
}

fn closed_form(c: &Sym3) -> Option<[f64; 3]> {
    let off = c[0][1] * c[0][1] + c[0][2] * c[0][2] + c[1][2] * c[1][2];
    if off == 0.0 {
        return Some([c[0][0], c[1][1], c[2][2]]);
    }
    let q = (c[0][0] + c[1][1] + c[2][2]) / 3.0;
    let (a, b, d) = (c[0][0] - q, c[1][1] - q, c[2][2] - q);
    let p2 = a * a + b * b + d * d + 2.0 * off;
    let p = (p2 / 6.0).sqrt();
    if !(p > 0.0) {
        return None;
    }
    // B = (C - qI) / p; r = det(B) / 2
    let (b00, b11, b22) = (a / p, b / p, d / p);
    let (b01, b02, b12) = (c[0][1] / p, c[0][2] / p, c[1][2] / p);
    let det = b00 * (b11 * b22 - b12 * b12) - b01 * (b01 * b22 - b12 * b02)
        + b02 * (b01 * b12 - b11 * b02);
    let r = (det / 2.0).clamp(-1.0, 1.0);
    if 1.0 - r * r < NEAR_DEGENERATE {
        return None;
    }
    let phi = r.acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3).cos();
    let e2 = 3.0 * q - e1 - e3;
    Some([e1, e2, e3])
}

/// Cyclic Jacobi rotations. Returns eigenvalues and the eigenvectors as
/// columns of the second value (unsorted, paired by position).
pub fn jacobi(c: &Sym3) -> ([f64; 3], Sym3) {
    let mut a = *c;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _sweep in 0..64 {
        let off = a[0][1].abs() + a[0][2].abs() + a[1][2].abs();
        let scale = a[0][0].abs() + a[1][1].abs() + a[2][2].abs();
        if off == 0.0 || off <= f64::EPSILON * 1e-3 * scale {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let cs = 1.0 / (t * t + 1.0).sqrt();
            let sn = t * cs;
            // A <- J^T A J
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = cs * akp - sn * akq;
                a[k][q] = sn * akp + cs * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = cs * apk - sn * aqk;
                a[q][k] = sn * apk + cs * aqk;
            }
            for row in v.iter_mut() {
                let vp = row[p];
                let vq = row[q];
                row[p] = cs * vp - sn * vq;
                row[q] = sn * vp + cs * vq;
            }
        }
    }
    ([a[0][0], a[1][1], a[2][2]], v)
}

fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Unit eigenvector of the smallest eigenvalue. `None` for the zero matrix.
pub fn smallest_eigenvector(c: &Sym3) -> Option<Point3> {
    let scale = c.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return None;
    }
    let lambda = eigenvalues(c).lambda3;
    let rows: [Point3; 3] = [
        [c[0][0] - lambda, c[0][1], c[0][2]],
        [c[1][0], c[1][1] - lambda, c[1][2]],
        [c[2][0], c[2][1], c[2][2] - lambda],
    ];
    // The null vector of (C - lambda I) is orthogonal to every row; take the
    // best-conditioned cross product.
    let candidates = [
        cross(rows[0], rows[1]),
        cross(rows[0], rows[2]),
        cross(rows[1], rows[2]),
    ];
    let (best, n2) = candidates
        .iter()
        .map(|v| (*v, v[0] * v[0] + v[1] * v[1] + v[2] * v[2]))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    if n2 > (1e-6 * scale * scale).powi(2) {
        let n = n2.sqrt();
        return Some([best[0] / n, best[1] / n, best[2] / n]);
    }
    // Repeated smallest eigenvalue (or worse): fall back to Jacobi.
    let (vals, vecs) = jacobi(c);
    let k = (0..3).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    let v = [vecs[0][k], vecs[1][k], vecs[2][k]];
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    Some([v[0] / n, v[1] / n, v[2] / n])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix() {
        let e = eigenvalues(&[[1.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 2.0]]);
        assert_eq!((e.lambda1, e.lambda2, e.lambda3), (3.0, 2.0, 1.0));
    }

    #[test]
    fn repeated_roots_use_fallback() {
        // Eigenvalues {2, 2, 5}: rotation of diag(2, 2, 5).
        let s = 1.0 / 2f64.sqrt();
        let r = [[s, -s, 0.0], [s, s, 0.0], [0.0, 0.0, 1.0]];
        let d = [2.0, 5.0, 2.0];
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                c[i][j] = (0..3).map(|k| r[i][k] * d[k] * r[j][k]).sum();
            }
        }
        let e = eigenvalues(&c);
        assert!((e.lambda1 - 5.0).abs() < 1e-12);
        assert!((e.lambda2 - 2.0).abs() < 1e-12);
        assert!((e.lambda3 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn smallest_vector_of_flat_covariance() {
        let c = [[2.0, 0.5, 0.0], [0.5, 1.0, 0.0], [0.0, 0.0, 0.0]];
        let v = smallest_eigenvector(&c).unwrap();
        assert!((v[2].abs() - 1.0).abs() < 1e-12, "{v:?}");
        assert!(smallest_eigenvector(&[[0.0; 3]; 3]).is_none());
    }

    #[test]
    fn eigenvector_satisfies_definition() {
        let c = [[4.0, 1.0, 0.3], [1.0, 3.0, -0.7], [0.3, -0.7, 0.5]];
        let lambda = eigenvalues(&c).lambda3;
        let v = smallest_eigenvector(&c).unwrap();
        for i in 0..3 {
            let cv: f64 = (0..3).map(|j| c[i][j] * v[j]).sum();
            assert!((cv - lambda * v[i]).abs() < 1e-10);
        }
    }
}
