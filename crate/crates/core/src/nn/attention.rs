use crate::error::{Error, Result};
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor2;

/// `softmax((Q K^T + A) / sqrt(d_k)) V` recorded on `tape`.
pub fn graph_attention_on(tape: &mut Tape, q: Var, k: Var, v: Var, a: Var) -> Result<Var> {
    let (n, d_k) = tape.value(q).shape();
    if tape.value(k).shape() != (n, d_k) || tape.value(v).rows != n || tape.value(a).shape() != (n, n) {
        return Err(Error::ShapeMismatch(format!(
            "attention Q {:?} K {:?} V {:?} A {:?}",
            tape.value(q).shape(),
            tape.value(k).shape(),
            tape.value(v).shape(),
            tape.value(a).shape()
        )));
    }
    let s = tape.matmul_t(q, false, k, true)?;
    let s = tape.add(s, a)?;
    let s = tape.scale(s, 1.0 / (d_k as f64).sqrt());
    let p = tape.softmax_rows(s, None)?;
    tape.matmul(p, v)
}

/// Projection weights of one multi-head attention block. `w_q`, `w_k` and
/// `w_v` hold all heads side by side (`d x heads*d_k`).
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub heads: usize,
    pub d_k: usize,
}

/// Multi-head graph attention: heads are concatenated then projected by `w_o`.
pub fn multi_head_attention_on(tape: &mut Tape, x: Var, a: Var, w: &AttentionVars) -> Result<Var> {
    let q_all = tape.matmul(x, w.w_q)?;
    let k_all = tape.matmul(x, w.w_k)?;
    let v_all = tape.matmul(x, w.w_v)?;
    let mut heads = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let q = tape.slice_cols(q_all, h * w.d_k, w.d_k)?;
        let k = tape.slice_cols(k_all, h * w.d_k, w.d_k)?;
        let v = tape.slice_cols(v_all, h * w.d_k, w.d_k)?;
        heads.push(graph_attention_on(tape, q, k, v, a)?);
    }
    let cat = tape.concat_cols(&heads)?;
    tape.matmul(cat, w.w_o)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor2,
    pub w_k: Tensor2,
    pub w_v: Tensor2,
    pub w_o: Tensor2,
    pub heads: usize,
    pub d_k: usize,
}

pub fn graph_attention(q: &Tensor2, k: &Tensor2, v: &Tensor2, a: &Tensor2) -> Result<Tensor2> {
    let mut tape = Tape::new();
    let (q, k, v, a) = (
        tape.input(q.clone()),
        tape.input(k.clone()),
        tape.input(v.clone()),
        tape.input(a.clone()),
    );
    let out = graph_attention_on(&mut tape, q, k, v, a)?;
    Ok(tape.value(out).clone())
}

pub fn multi_head_attention(x: &Tensor2, a: &Tensor2, p: &AttentionParams) -> Result<Tensor2> {
    let width = p.heads * p.d_k;
    for (name, w) in [("W_q", &p.w_q), ("W_k", &p.w_k), ("W_v", &p.w_v)] {
        if w.shape() != (x.cols, width) {
            return Err(Error::ShapeMismatch(format!("{name} is {:?}", w.shape())));
        }
    }
    if p.w_o.rows != width {
        return Err(Error::ShapeMismatch(format!("W_o is {:?}", p.w_o.shape())));
    }
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let av = tape.input(a.clone());
    let w = AttentionVars {
        w_q: tape.input(p.w_q.clone()),
        w_k: tape.input(p.w_k.clone()),
        w_v: tape.input(p.w_v.clone()),
        w_o: tape.input(p.w_o.clone()),
        heads: p.heads,
        d_k: p.d_k,
    };
    let out = multi_head_attention_on(&mut tape, xv, av, &w)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_scores_average_values() {
        let q = Tensor2::zeros(3, 2);
        let v = Tensor2::from_rows(&[[3.0], [6.0], [9.0]]).unwrap();
        let out = graph_attention(&q, &q, &v, &Tensor2::zeros(3, 3)).unwrap();
        for r in 0..3 {
            assert!((out.get(r, 0) - 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adjacency_bias_shifts_weight() {
        let q = Tensor2::zeros(2, 1);
        let v = Tensor2::from_rows(&[[0.0], [1.0]]).unwrap();
        let a = Tensor2::from_rows(&[[0.0, 2.0], [0.0, 0.0]]).unwrap();
        let out = graph_attention(&q, &q, &v, &a).unwrap();
        let e = 2f64.exp();
        assert!((out.get(0, 0) - e / (1.0 + e)).abs() < 1e-12);
        assert!((out.get(1, 0) - 0.5).abs() < 1e-12);
    }
}
