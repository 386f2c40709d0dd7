use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::PcwGraph;
use crate::model::{Dropout, Mode, QualityModel};
use crate::nn::{Tape, Tensor2, Var};

#[derive(Debug, Clone, Copy)]
pub struct GatLayerVars {
    /// `d_in x heads*d_head`, heads side by side.
    pub w: Var,
    /// `1 x heads*2*d_head`; per head the source half then the target half.
    pub a: Var,
    pub heads: usize,
    pub d_head: usize,
    /// Concatenate heads (hidden layers) or average them (last layer).
    pub concat: bool,
}

#[derive(Debug, Clone)]
pub struct GatVars {
    pub layers: Vec<GatLayerVars>,
    pub w_out: Var,
    pub b_out: Var,
    pub slope: f64,
    pub feature_dropout: f64,
    pub attention_dropout: f64,
}

/// One GAT layer:
/// `e_ij = LeakyReLU(a_l . W h_i + a_r . W h_j)` over masked pairs,
/// `alpha = softmax_j(e)`, `h'_i = tanh(combine_heads(sum_j alpha_ij W h_j))`.
#[allow(clippy::too_many_arguments)]
pub fn gat_layer_on(
    tape: &mut Tape,
    h: Var,
    mask: &Arc<Vec<bool>>,
    layer: &GatLayerVars,
    slope: f64,
    feature_dropout: f64,
    attention_dropout: f64,
    dropout: &mut Dropout,
) -> Result<Var> {
    let k = tape.value(h).rows;
    if mask.len() != k * k {
        return Err(Error::ShapeMismatch(format!("mask of {} for {k} nodes", mask.len())));
    }
    let d = layer.d_head;
    let h = dropout.apply(tape, h, feature_dropout);
    let wh_all = tape.matmul(h, layer.w)?;
    let mut heads = Vec::with_capacity(layer.heads);
    for i in 0..layer.heads {
        let wh = tape.slice_cols(wh_all, i * d, d)?;
        let a_l = tape.slice_cols(layer.a, 2 * i * d, d)?;
        let a_r = tape.slice_cols(layer.a, 2 * i * d + d, d)?;
        let s_l = tape.matmul_t(wh, false, a_l, true)?;
        let s_r = tape.matmul_t(a_r, false, wh, true)?;
        let e = tape.add(s_l, s_r)?;
        let e = tape.leaky_relu(e, slope);
        let alpha = tape.softmax_rows(e, Some(mask.clone()))?;
        let alpha = dropout.apply(tape, alpha, attention_dropout);
        heads.push(tape.matmul(alpha, wh)?);
    }
    let combined = if layer.concat {
        tape.concat_cols(&heads)?
    } else {
        let mut sum = heads[0];
        for &hd in &heads[1..] {
            sum = tape.add(sum, hd)?;
        }
        tape.scale(sum, 1.0 / layer.heads as f64)
    };
    Ok(tape.tanh(combined))
}

/// GAT stack, mean pooling over nodes and the linear output head.
pub fn gat_forward_on(
    tape: &mut Tape,
    z: Var,
    mask: &Arc<Vec<bool>>,
    vars: &GatVars,
    dropout: &mut Dropout,
) -> Result<Var> {
    let mut h = z;
    for layer in &vars.layers {
        h = gat_layer_on(
            tape,
            h,
            mask,
            layer,
            vars.slope,
            vars.feature_dropout,
            vars.attention_dropout,
            dropout,
        )?;
    }
    let pooled = tape.row_mean(h);
    let out = tape.matmul(pooled, vars.w_out)?;
    tape.add(out, vars.b_out)
}

/// Infer-mode GAT layer on plain matrices; `w` and `a` laid out as in
/// [`GatLayerVars`].
pub fn gat_layer(
    h: &Tensor2,
    mask: &[bool],
    w: &Tensor2,
    a: &Tensor2,
    heads: usize,
    concat: bool,
    slope: f64,
) -> Result<Tensor2> {
    if heads == 0 || w.cols % heads != 0 || a.shape() != (1, 2 * w.cols) || w.rows != h.cols {
        return Err(Error::ShapeMismatch(format!(
            "gat layer h {:?}, w {:?}, a {:?}, {heads} heads",
            h.shape(),
            w.shape(),
            a.shape()
        )));
    }
    let mut tape = Tape::new();
    let hv = tape.input(h.clone());
    let vars = GatLayerVars {
        w: tape.input(w.clone()),
        a: tape.input(a.clone()),
        heads,
        d_head: w.cols / heads,
        concat,
    };
    let mask = Arc::new(mask.to_vec());
    let out = gat_layer_on(&mut tape, hv, &mask, &vars, slope, 0.0, 0.0, &mut Dropout::new(Mode::Infer))?;
    Ok(tape.value(out).clone())
}

/// Scalar score of `model` for `graph`.
pub fn gat_forward(model: &QualityModel, graph: &PcwGraph, mode: Mode) -> Result<f64> {
    let mut tape = Tape::new();
    let out = model.forward_on(&mut tape, graph, mode)?;
    Ok(tape.value(out.score).data[0])
}
