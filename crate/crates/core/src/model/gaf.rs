use crate::error::Result;
use crate::graph::PcwGraph;
use crate::model::{Dropout, Mode, QualityModel};
use crate::nn::{multi_head_attention_on, AttentionVars, Tape, Tensor2, Var};

/// One fusion branch: per layer `[w_q, w_k, w_v, w_o]`.
#[derive(Debug, Clone)]
pub struct BranchVars {
    pub layers: Vec<[Var; 4]>,
}

#[derive(Debug, Clone)]
pub struct GafVars {
    pub branches: [BranchVars; 3],
    pub w_p: Var,
    pub b_p: Var,
    pub heads: usize,
    pub d_k: usize,
    pub dropout: f64,
}

/// Runs each branch's attention stack on the shared node features with its
/// own adjacency, concatenates, projects, applies ReLU and (in train mode)
/// dropout. Returns the branch outputs and the fused `k x d_out` matrix.
pub fn gaf_forward_on(
    tape: &mut Tape,
    x: Var,
    adjacency: [Var; 3],
    vars: &GafVars,
    dropout: &mut Dropout,
) -> Result<([Var; 3], Var)> {
    let mut outs = [x; 3];
    for (b, branch) in vars.branches.iter().enumerate() {
        let mut h = x;
        for &[w_q, w_k, w_v, w_o] in &branch.layers {
            let w = AttentionVars {
                w_q,
                w_k,
                w_v,
                w_o,
                heads: vars.heads,
                d_k: vars.d_k,
            };
            h = multi_head_attention_on(tape, h, adjacency[b], &w)?;
        }
        outs[b] = h;
    }
    let fused = tape.concat_cols(&outs)?;
    let proj = tape.matmul(fused, vars.w_p)?;
    let proj = tape.add(proj, vars.b_p)?;
    let act = tape.relu(proj);
    Ok((outs, dropout.apply(tape, act, vars.dropout)))
}

/// Fusion output of `model` for `graph` as a plain matrix.
pub fn gaf_forward(model: &QualityModel, graph: &PcwGraph, mode: Mode) -> Result<Tensor2> {
    let mut tape = Tape::new();
    let out = model.forward_on(&mut tape, graph, mode)?;
    Ok(tape.value(out.gaf).clone())
}
