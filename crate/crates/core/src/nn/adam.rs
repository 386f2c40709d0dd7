use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor2;

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor2>,
    pub v: Vec<Tensor2>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        OptimizerState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor2], state: &mut OptimizerState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradients, {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.get(i).shape() {
            return Err(Error::ShapeMismatch(format!(
                "gradient for {} has shape {:?}",
                params.name(i),
                g.shape()
            )));
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, g) in grads.iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = params.get_mut(i);
        for j in 0..g.len() {
            let gj = g.data[j];
            m.data[j] = b1 * m.data[j] + (1.0 - b1) * gj;
            v.data[j] = b2 * v.data[j] + (1.0 - b2) * gj * gj;
            let mh = m.data[j] / c1;
            let vh = v.data[j] / c2;
            p.data[j] -= state.lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}
