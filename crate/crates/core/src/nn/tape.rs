//! Reverse-mode differentiation over a recorded tape of primitive ops.
//!
//! Every op appends a node holding its output value; `backward` walks the
//! tape in reverse. Supported primitives: matmul (with optional operand
//! transposes), broadcasting add, constant scale, row softmax (optionally
//! masked), tanh, ReLU, LeakyReLU, column concat, column slice, row mean
//! and dropout with a stored mask.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::tensor::{gemm_acc, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Concat(Vec<Var>),
    Slice { a: Var, start: usize },
    RowMean(Var),
    Dropout { a: Var, mask: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor2,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Tensor2>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    /// Gradient with respect to any recorded value (None if it does not
    /// influence the output).
    pub fn wrt(&self, v: Var) -> Option<&Tensor2> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of parameter `index`, summed over all of its uses.
    pub fn param(&self, index: usize) -> Option<Tensor2> {
        let mut acc: Option<Tensor2> = None;
        for &(p, v) in &self.params {
            if p != index {
                continue;
            }
            if let Some(g) = self.wrt(v) {
                match acc.as_mut() {
                    Some(a) => add_assign(a, g),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }
}

fn add_assign(dst: &mut Tensor2, src: &Tensor2) {
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

/// Sums `g` down to `rows x cols` along broadcast dimensions.
fn reduce_to(g: &Tensor2, rows: usize, cols: usize) -> Tensor2 {
    if g.rows == rows && g.cols == cols {
        return g.clone();
    }
    let mut out = Tensor2::zeros(rows, cols);
    for r in 0..g.rows {
        for c in 0..g.cols {
            let (rr, cc) = (if rows == 1 { 0 } else { r }, if cols == 1 { 0 } else { c });
            out.data[rr * cols + cc] += g.data[r * g.cols + c];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    /// A constant input (no parameter gradient, but `wrt` still works).
    pub fn input(&mut self, t: Tensor2) -> Var {
        self.push(t, Op::Input)
    }

    /// A trainable leaf identified by `index`.
    pub fn param(&mut self, index: usize, t: &Tensor2) -> Var {
        self.push(t.clone(), Op::Param(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)`, `op` transposing when the flag is set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let value = Tensor2::matmul_t(self.value(a), ta, self.value(b), tb)?;
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }))
    }

    /// Elementwise sum; a dimension of size 1 broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (rows, cols) = match (broadcast_dim(x.rows, y.rows), broadcast_dim(x.cols, y.cols)) {
            (Some(r), Some(c)) => (r, c),
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "add {:?} and {:?}",
                    x.shape(),
                    y.shape()
                )))
            }
        };
        let mut out = Tensor2::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let xv = x.data[(if x.rows == 1 { 0 } else { r }) * x.cols + if x.cols == 1 { 0 } else { c }];
                let yv = y.data[(if y.rows == 1 { 0 } else { r }) * y.cols + if y.cols == 1 { 0 } else { c }];
                out.data[r * cols + c] = xv + yv;
            }
        }
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.push(value, Op::Scale(a, c))
    }

    /// Row-wise softmax with max subtraction. With a mask, only `true`
    /// entries take part and the rest are exactly zero.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let x = self.value(a);
        if let Some(m) = &mask {
            if m.len() != x.len() {
                return Err(Error::ShapeMismatch("softmax mask size".into()));
            }
        }
        let mut out = Tensor2::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let keep = |c: usize| mask.as_ref().map_or(true, |m| m[r * x.cols + c]);
            let row = x.row(r);
            let max = (0..x.cols)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::EmptyNeighborhood(r));
            }
            let dst = out.row_mut(r);
            let mut sum = 0.0;
            for c in 0..x.cols {
                if keep(c) {
                    dst[c] = (row[c] - max).exp();
                    sum += dst[c];
                }
            }
            for v in dst.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(a, slope))
    }

    /// Concatenates along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows)
            .ok_or_else(|| Error::ShapeMismatch("concat of nothing".into()))?;
        if parts.iter().any(|&p| self.value(p).rows != rows) {
            return Err(Error::ShapeMismatch("concat row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor2::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p);
                out.row_mut(r)[offset..offset + src.cols].copy_from_slice(src.row(r));
                offset += src.cols;
            }
        }
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.cols {
            return Err(Error::ShapeMismatch(format!(
                "slice {start}..{} of {} columns",
                start + len,
                x.cols
            )));
        }
        let mut out = Tensor2::zeros(x.rows, len);
        for r in 0..x.rows {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::Slice { a, start }))
    }

    /// Mean over rows, giving `1 x cols`.
    pub fn row_mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Tensor2::zeros(1, x.cols);
        for r in 0..x.rows {
            for (o, v) in out.data.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let n = x.rows as f64;
        for o in out.data.iter_mut() {
            *o /= n;
        }
        self.push(out, Op::RowMean(a))
    }

    /// Inverted dropout: entries are zeroed with probability `p`, survivors
    /// scaled by `1 / (1 - p)`. The mask is stored for the backward pass.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        let x = self.value(a);
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut value = x.clone();
        for (v, m) in value.data.iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push(value, Op::Dropout { a, mask })
    }

    /// Signs of every ReLU and LeakyReLU input on the tape, in order. Two
    /// forward passes with equal patterns lie on the same linear piece of
    /// those activations.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) | Op::LeakyRelu(a, _) = node.op {
                out.extend(self.value(a).data.iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Backward pass for a scalar (`1 x 1`) output.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients> {
        self.backward(output, Tensor2::filled(1, 1, 1.0))
    }

    /// Backward pass seeded with `upstream` = dL/d(output).
    pub fn backward(&self, output: Var, upstream: Tensor2) -> Result<Gradients> {
        let out = self.nodes.get(output.0).ok_or(Error::UnrecordedForward)?;
        if out.value.shape() != upstream.shape() {
            return Err(Error::ShapeMismatch(format!(
                "upstream {:?} for output {:?}",
                upstream.shape(),
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; output.0 + 1];
        grads[output.0] = Some(upstream);

        fn acc(grads: &mut [Option<Tensor2>], v: Var, g: Tensor2) {
            match grads[v.0].as_mut() {
                Some(existing) => add_assign(existing, &g),
                None => grads[v.0] = Some(g),
            }
        }

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Tensor2::zeros(av.rows, av.cols);
                    if *ta {
                        gemm_acc(bv, *tb, &g, true, 1.0, &mut ga);
                    } else {
                        gemm_acc(&g, false, bv, !*tb, 1.0, &mut ga);
                    }
                    let mut gb = Tensor2::zeros(bv.rows, bv.cols);
                    if *tb {
                        gemm_acc(&g, true, av, *ta, 1.0, &mut gb);
                    } else {
                        gemm_acc(av, !*ta, &g, false, 1.0, &mut gb);
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    let (ash, bsh) = (self.value(*a).shape(), self.value(*b).shape());
                    acc(&mut grads, *a, reduce_to(&g, ash.0, ash.1));
                    acc(&mut grads, *b, reduce_to(&g, bsh.0, bsh.1));
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.map(|v| v * c)),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut gx = Tensor2::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (c, d) in gx.row_mut(r).iter_mut().enumerate() {
                            *d = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::Tanh(a) => {
                    let mut gx = g;
                    for (d, y) in gx.data.iter_mut().zip(&node.value.data) {
                        *d *= 1.0 - y * y;
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::Relu(a) => {
                    let mut gx = g;
                    for (d, x) in gx.data.iter_mut().zip(&self.value(*a).data) {
                        if *x <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::LeakyRelu(a, slope) => {
                    let mut gx = g;
                    for (d, x) in gx.data.iter_mut().zip(&self.value(*a).data) {
                        if *x <= 0.0 {
                            *d *= slope;
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols;
                        let mut gp = Tensor2::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::Slice { a, start } => {
                    let x = self.value(*a);
                    let mut gx = Tensor2::zeros(x.rows, x.cols);
                    for r in 0..g.rows {
                        gx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::RowMean(a) => {
                    let x = self.value(*a);
                    let n = x.rows as f64;
                    let mut gx = Tensor2::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        for (d, s) in gx.row_mut(r).iter_mut().zip(&g.data) {
                            *d = s / n;
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::Dropout { a, mask } => {
                    let mut gx = g;
                    for (d, m) in gx.data.iter_mut().zip(mask) {
                        *d *= m;
                    }
                    acc(&mut grads, *a, gx);
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) if i <= output.0 => Some((p, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { nodes: grads, params })
    }
}
