//! Quality-metric protocol: five-parameter logistic mapping of predictions,
//! then PLCC, SRCC, KRCC and RMSE against MOS.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{DatasetManifest, ManifestEntry};
use crate::pipeline::GraphCache;
use crate::training::{split_dataset, Predictor, SplitPart};

pub const FLAG_CONSTANT_PREDICTION: &str = "constant_prediction";
pub const FLAG_CONSTANT_MAPPED: &str = "constant_mapped_prediction";
pub const FLAG_LINEAR_MAPPING: &str = "linear_mapping";

const NM_MAX_ITER: usize = 2000;
const NM_TOL: f64 = 1e-10;

/// `1 / (1 + exp(z))` without overflow.
fn inv_one_plus_exp(z: f64) -> f64 {
    if z > 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

/// `b1 (0.5 - 1 / (1 + exp(b2 (y - b3)))) + b4 y + b5`.
pub fn logistic(beta: &[f64; 5], y: f64) -> f64 {
    let [b1, b2, b3, b4, b5] = *beta;
    b1 * (0.5 - inv_one_plus_exp(b2 * (y - b3))) + b4 * y + b5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub beta: [f64; 5],
    /// Sum of squared residuals on the fitted data.
    pub residual: f64,
}

impl LogisticParams {
    pub fn map(&self, y: f64) -> f64 {
        logistic(&self.beta, y)
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn std_dev(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

fn sse(beta: &[f64; 5], pred: &[f64], mos: &[f64]) -> f64 {
    let s: f64 = pred
        .iter()
        .zip(mos)
        .map(|(&p, &m)| {
            let r = logistic(beta, p) - m;
            r * r
        })
        .sum();
    if s.is_finite() {
        s
    } else {
        f64::INFINITY
    }
}

/// Least-squares `y ~ slope * x + intercept`; slope 0 for constant `x`.
fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

/// Nelder-Mead minimization of `f` from `x0`.
pub fn nelder_mead<const N: usize>(f: impl Fn(&[f64; N]) -> f64, x0: [f64; N], max_iter: usize, tol: f64) -> ([f64; N], f64) {
    let mut simplex: Vec<([f64; N], f64)> = Vec::with_capacity(N + 1);
    simplex.push((x0, f(&x0)));
    for i in 0..N {
        let mut x = x0;
        x[i] = if x[i] != 0.0 { x[i] * 1.05 } else { 0.00025 };
        simplex.push((x, f(&x)));
    }
    let point = |a: &[f64; N], b: &[f64; N], t: f64| -> [f64; N] {
        let mut out = [0.0; N];
        for i in 0..N {
            out[i] = a[i] + t * (b[i] - a[i]);
        }
        out
    };
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].0;
        let size = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&best).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        let scale = best.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if size / scale < tol {
            break;
        }
        let mut centroid = [0.0; N];
        for (x, _) in &simplex[..N] {
            for i in 0..N {
                centroid[i] += x[i] / N as f64;
            }
        }
        let (worst, f_worst) = simplex[N];
        let reflected = point(&centroid, &worst, -1.0);
        let f_r = f(&reflected);
        if f_r < simplex[0].1 {
            let expanded = point(&centroid, &worst, -2.0);
            let f_e = f(&expanded);
            simplex[N] = if f_e < f_r { (expanded, f_e) } else { (reflected, f_r) };
            continue;
        }
        if f_r < simplex[N - 1].1 {
            simplex[N] = (reflected, f_r);
            continue;
        }
        let (contracted, f_c) = if f_r < f_worst {
            let c = point(&centroid, &reflected, 0.5);
            (c, f(&c))
        } else {
            let c = point(&centroid, &worst, 0.5);
            (c, f(&c))
        };
        if f_c < f_worst.min(f_r) {
            simplex[N] = (contracted, f_c);
            continue;
        }
        for j in 1..=N {
            let x = point(&best, &simplex[j].0, 0.5);
            simplex[j] = (x, f(&x));
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0]
}

/// Refits the outer scale and offset of a mapping by least squares, which
/// keeps the curve in the family and never increases the residual.
fn polish(beta: [f64; 5], pred: &[f64], mos: &[f64]) -> [f64; 5] {
    let mapped: Vec<f64> = pred.iter().map(|&p| logistic(&beta, p)).collect();
    let (c, d) = linear_fit(&mapped, mos);
    [c * beta[0], beta[1], beta[2], c * beta[3], c * beta[4] + d]
}

fn check_lengths(pred: &[f64], mos: &[f64]) -> Result<()> {
    if pred.len() != mos.len() {
        return Err(Error::LengthMismatch(pred.len(), mos.len()));
    }
    if pred.iter().chain(mos).any(|v| !v.is_finite()) {
        return Err(Error::InvalidCloud("non-finite score".into()));
    }
    Ok(())
}

fn linear_candidate(pred: &[f64], mos: &[f64]) -> [f64; 5] {
    let (slope, intercept) = linear_fit(pred, mos);
    let sd = std_dev(pred);
    [0.0, if sd > 0.0 { 1.0 / sd } else { 1.0 }, mean(pred), slope, intercept]
}

/// Fits the five-parameter logistic by Nelder-Mead from the conventional
/// start, also trying the best straight line and a search started from it;
/// the lowest residual wins. Samples are put in a canonical order first so
/// the result does not depend on input order.
pub fn fit_logistic(pred: &[f64], mos: &[f64]) -> Result<LogisticParams> {
    check_lengths(pred, mos)?;
    if pred.len() < 5 {
        return Err(Error::TooFewSamples {
            needed: 5,
            got: pred.len(),
        });
    }
    let (lo, hi) = mos.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if lo == hi {
        return Err(Error::ConstantTarget);
    }
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| cmp_value(pred[a], pred[b]).then(cmp_value(mos[a], mos[b])));
    let pred: &[f64] = &order.iter().map(|&i| pred[i]).collect::<Vec<_>>();
    let mos: &[f64] = &order.iter().map(|&i| mos[i]).collect::<Vec<_>>();
    let linear = linear_candidate(pred, mos);
    let mut candidates = vec![linear];
    if std_dev(pred) > 0.0 {
        let start = [hi - lo, 1.0 / std_dev(pred), mean(pred), 0.0, mean(mos)];
        let objective = |b: &[f64; 5]| sse(b, pred, mos);
        candidates.push(nelder_mead(objective, start, NM_MAX_ITER, NM_TOL).0);
        candidates.push(nelder_mead(objective, linear, NM_MAX_ITER, NM_TOL).0);
    }
    let best = candidates
        .into_iter()
        .flat_map(|b| [b, polish(b, pred, mos)])
        .map(|b| (b, sse(&b, pred, mos)))
        .filter(|(b, s)| s.is_finite() && b.iter().all(|v| v.is_finite()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("the linear candidate is finite");
    Ok(LogisticParams {
        beta: best.0,
        residual: best.1,
    })
}

/// Pearson correlation; `None` when either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks, ties sharing their average rank.
/// Total order that treats `-0.0` and `0.0` as equal.
fn cmp_value(a: f64, b: f64) -> std::cmp::Ordering {
    (a + 0.0).total_cmp(&(b + 0.0))
}

pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| cmp_value(x[a], x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Pairs tied within consecutive runs of equal values of a sorted slice.
fn tied_pairs(sorted: impl Iterator<Item = bool>) -> u64 {
    // `sorted` yields whether each element equals its predecessor.
    let (mut total, mut run) = (0u64, 1u64);
    for same in sorted {
        if same {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Sorts `v` by merge sort and returns the number of inversions.
fn count_swaps(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = count_swaps(&mut v[..mid], buf) + count_swaps(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Kendall tau-b in O(n log n); `None` when either input is constant.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return None;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| cmp_value(x[a], x[b]).then(cmp_value(y[a], y[b])));
    let n0 = (n as u64) * (n as u64 - 1) / 2;
    let ties_x = tied_pairs((1..n).map(|i| x[idx[i]] == x[idx[i - 1]]));
    let ties_xy = tied_pairs((1..n).map(|i| x[idx[i]] == x[idx[i - 1]] && y[idx[i]] == y[idx[i - 1]]));
    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let swaps = count_swaps(&mut ys, &mut Vec::with_capacity(n));
    let ties_y = tied_pairs((1..n).map(|i| ys[i] == ys[i - 1]));
    let (dx, dy) = ((n0 - ties_x) as f64, (n0 - ties_y) as f64);
    if dx == 0.0 || dy == 0.0 {
        return None;
    }
    let concordant_minus_discordant =
        n0 as f64 - ties_x as f64 - ties_y as f64 + ties_xy as f64 - 2.0 * swaps as f64;
    Some((concordant_minus_discordant / (dx * dy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub plcc: f64,
    pub srcc: f64,
    pub krcc: f64,
    /// RMSE of the logistic-mapped predictions, MOS units.
    pub rmse: f64,
    /// RMSE of the predictions before mapping.
    pub rmse_raw: f64,
    pub beta: [f64; 5],
    pub flags: Vec<String>,
    #[serde(skip)]
    pub mapped: Vec<f64>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (name, v) in [
            ("PLCC", self.plcc),
            ("SRCC", self.srcc),
            ("KRCC", self.krcc),
            ("RMSE", self.rmse),
            ("RMSE (raw)", self.rmse_raw),
        ] {
            out.push_str(&format!("{name:<12}{v:>12.6}\n"));
        }
        out.push_str(&format!("{:<12}{:>12}\n", "n", self.n));
        let beta: Vec<String> = self.beta.iter().map(|b| format!("{b:.6}")).collect();
        out.push_str(&format!("{:<12}{}\n", "beta", beta.join(" ")));
        if !self.flags.is_empty() {
            out.push_str(&format!("{:<12}{}\n", "flags", self.flags.join(", ")));
        }
        out
    }
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

/// All four criteria. SRCC and KRCC use the raw predictions; PLCC and RMSE
/// the logistic-mapped ones. Fewer than 5 samples fall back to a linear map.
pub fn correlations(pred: &[f64], mos: &[f64]) -> Result<EvalReport> {
    check_lengths(pred, mos)?;
    let n = pred.len();
    if n < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: n });
    }
    let mut flags = Vec::new();
    let beta = if n >= 5 {
        fit_logistic(pred, mos)?.beta
    } else {
        flags.push(FLAG_LINEAR_MAPPING.to_string());
        linear_candidate(pred, mos)
    };
    let mapped: Vec<f64> = pred.iter().map(|&p| logistic(&beta, p)).collect();
    let mut metric = |v: Option<f64>, flag: &str| {
        v.unwrap_or_else(|| {
            if !flags.iter().any(|f| f == flag) {
                flags.push(flag.to_string());
            }
            0.0
        })
    };
    let srcc = metric(spearman(pred, mos), FLAG_CONSTANT_PREDICTION);
    let krcc = metric(kendall_tau_b(pred, mos), FLAG_CONSTANT_PREDICTION);
    let plcc = metric(pearson(&mapped, mos), FLAG_CONSTANT_MAPPED);
    Ok(EvalReport {
        n,
        plcc,
        srcc,
        krcc,
        rmse: rmse(&mapped, mos),
        rmse_raw: rmse(pred, mos),
        beta,
        flags,
        mapped,
    })
}

/// CSV of `pred,mapped_pred,mos` rows.
pub fn scatter_csv(pred: &[f64], report: &EvalReport, mos: &[f64]) -> String {
    let mut out = String::from("pred,mapped_pred,mos\n");
    for ((p, m), t) in pred.iter().zip(&report.mapped).zip(mos) {
        out.push_str(&format!("{p},{m},{t}\n"));
    }
    out
}

/// Scores and targets of one evaluated split with its report.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub indices: Vec<usize>,
    pub pred: Vec<f64>,
    pub mos: Vec<f64>,
    pub report: EvalReport,
}

/// Scores the manifest entries at `indices` with `score` (MOS units) and
/// evaluates them against their MOS.
pub fn evaluate_scores<F>(manifest: &DatasetManifest, indices: &[usize], score: F) -> Result<Evaluation>
where
    F: Fn(&ManifestEntry) -> Result<f64> + Sync,
{
    let pred: Vec<Result<f64>> = indices.par_iter().map(|&i| score(&manifest.entries[i])).collect();
    let pred = pred.into_iter().collect::<Result<Vec<f64>>>()?;
    let mos: Vec<f64> = indices.iter().map(|&i| manifest.entries[i].mos).collect();
    let report = correlations(&pred, &mos)?;
    Ok(Evaluation {
        indices: indices.to_vec(),
        pred,
        mos,
        report,
    })
}

/// Predicts every entry of `part` (re-deriving the training split from the
/// checkpoint's seed) and reports the four criteria in MOS units.
pub fn evaluate_model(predictor: &Predictor, manifest: &DatasetManifest, part: SplitPart, cache: &GraphCache) -> Result<Evaluation> {
    let indices = match part {
        SplitPart::All => (0..manifest.len()).collect(),
        _ => split_dataset(manifest, predictor.meta.config.training.seed)?.part(part, manifest.len()),
    };
    evaluate_scores(manifest, &indices, |e| predictor.predict_cloud(&manifest.resolve(e), cache))
}
