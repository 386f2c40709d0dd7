//! Graph attention fusion (one attention stack per perceptual channel)
//! feeding a three-layer multi-head GAT regressor with mean pooling.

mod gaf;
mod gat;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{PcwGraph, NODE_DIM};
use crate::nn::{ParamStore, Tape, Tensor2, Var};

pub use gaf::{gaf_forward, gaf_forward_on, BranchVars, GafVars};
pub use gat::{gat_forward, gat_forward_on, gat_layer, gat_layer_on, GatLayerVars, GatVars};

pub const BRANCH_NAMES: [&str; 3] = ["color", "curvature", "saliency"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Stacked attention layers per fusion branch.
    pub gaf_layers: usize,
    pub gaf_heads: usize,
    pub d_k: usize,
    /// Width of the fused projection fed to the GAT.
    pub d_out: usize,
    pub fusion_dropout: f64,
    pub gat_hidden: usize,
    pub gat_heads: Vec<usize>,
    pub leaky_slope: f64,
    pub feature_dropout: f64,
    pub attention_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            gaf_layers: 2,
            gaf_heads: 4,
            d_k: 16,
            d_out: 64,
            fusion_dropout: 0.2,
            gat_hidden: 64,
            gat_heads: vec![8, 6, 4],
            leaky_slope: 0.2,
            feature_dropout: 0.3,
            attention_dropout: 0.3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gaf_layers", self.gaf_layers),
            ("gaf_heads", self.gaf_heads),
            ("d_k", self.d_k),
            ("d_out", self.d_out),
            ("gat_hidden", self.gat_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if self.gat_heads.is_empty() || self.gat_heads.contains(&0) {
            return Err(Error::Config("model.gat_heads must be non-empty and positive".into()));
        }
        for (name, p) in [
            ("fusion_dropout", self.fusion_dropout),
            ("feature_dropout", self.feature_dropout),
            ("attention_dropout", self.attention_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("model.{name} must be in [0, 1)")));
            }
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::Config("model.leaky_slope must be >= 0".into()));
        }
        Ok(())
    }

    /// Width of one fusion branch output.
    pub fn branch_width(&self) -> usize {
        self.gaf_heads * self.d_k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, masks drawn from the seed.
    Train { seed: u64 },
    Infer,
}

/// Dropout source for one forward pass; a no-op in infer mode.
pub struct Dropout {
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn new(mode: Mode) -> Self {
        Dropout {
            rng: match mode {
                Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
                Mode::Infer => None,
            },
        }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var, p: f64) -> Var {
        match self.rng.as_mut() {
            Some(rng) if p > 0.0 => tape.dropout(x, p, rng),
            _ => x,
        }
    }
}

/// Index layout of every parameter in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    /// Per branch, per layer: `[w_q, w_k, w_v, w_o]`.
    pub branches: Vec<Vec<[usize; 4]>>,
    pub w_p: usize,
    pub b_p: usize,
    /// Per GAT layer: `[w, a]`.
    pub gat: Vec<[usize; 2]>,
    pub w_out: usize,
    pub b_out: usize,
}

fn build_params(config: &ModelConfig, rng: &mut ChaCha8Rng) -> (ParamStore, ParamLayout) {
    let mut store = ParamStore::new();
    let width = config.branch_width();
    let mut branches = Vec::new();
    for name in BRANCH_NAMES {
        let mut layers = Vec::new();
        for l in 0..config.gaf_layers {
            let d_in = if l == 0 { NODE_DIM } else { width };
            let p = format!("gaf.{name}.{l}");
            layers.push([
                store.add(format!("{p}.w_q"), Tensor2::glorot(d_in, width, rng)),
                store.add(format!("{p}.w_k"), Tensor2::glorot(d_in, width, rng)),
                store.add(format!("{p}.w_v"), Tensor2::glorot(d_in, width, rng)),
                store.add(format!("{p}.w_o"), Tensor2::glorot(width, width, rng)),
            ]);
        }
        branches.push(layers);
    }
    let w_p = store.add("gaf.w_p", Tensor2::glorot(3 * width, config.d_out, rng));
    let b_p = store.add("gaf.b_p", Tensor2::zeros(1, config.d_out));
    let mut gat = Vec::new();
    let mut d_in = config.d_out;
    let last = config.gat_heads.len() - 1;
    for (l, &heads) in config.gat_heads.iter().enumerate() {
        let h = config.gat_hidden;
        gat.push([
            store.add(format!("gat.{l}.w"), Tensor2::glorot(d_in, heads * h, rng)),
            store.add(format!("gat.{l}.a"), Tensor2::glorot(1, heads * 2 * h, rng)),
        ]);
        d_in = if l == last { h } else { heads * h };
    }
    let w_out = store.add("head.w", Tensor2::glorot(d_in, 1, rng));
    let b_out = store.add("head.b", Tensor2::zeros(1, 1));
    (
        store,
        ParamLayout {
            branches,
            w_p,
            b_p,
            gat,
            w_out,
            b_out,
        },
    )
}

/// Vars produced by one recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// Per-branch outputs before fusion.
    pub branches: [Var; 3],
    pub gaf: Var,
    /// `1 x 1` score in normalized units.
    pub score: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub layout: ParamLayout,
}

impl QualityModel {
    /// Glorot-initialized weights, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, layout) = build_params(&config, &mut rng);
        Ok(QualityModel {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut model = QualityModel::new(config, 0)?;
        model.params.assign_from(params)?;
        Ok(model)
    }

    /// Records the full forward pass on `tape`, reading parameters through
    /// `param` leaves so gradients flow to them.
    pub fn forward_on(&self, tape: &mut Tape, graph: &PcwGraph, mode: Mode) -> Result<ForwardVars> {
        graph.validate()?;
        let leaf = |tape: &mut Tape, i: usize| tape.param(i, self.params.get(i));
        let branches = self
            .layout
            .branches
            .iter()
            .map(|layers| BranchVars {
                layers: layers
                    .iter()
                    .map(|ix| ix.map(|i| leaf(tape, i)))
                    .collect(),
            })
            .collect::<Vec<_>>();
        let gaf_vars = GafVars {
            branches: branches.try_into().expect("three branches"),
            w_p: leaf(tape, self.layout.w_p),
            b_p: leaf(tape, self.layout.b_p),
            heads: self.config.gaf_heads,
            d_k: self.config.d_k,
            dropout: self.config.fusion_dropout,
        };
        let gat_vars = GatVars {
            layers: self
                .layout
                .gat
                .iter()
                .zip(&self.config.gat_heads)
                .enumerate()
                .map(|(l, (&[w, a], &heads))| GatLayerVars {
                    w: leaf(tape, w),
                    a: leaf(tape, a),
                    heads,
                    d_head: self.config.gat_hidden,
                    concat: l + 1 < self.config.gat_heads.len(),
                })
                .collect(),
            w_out: leaf(tape, self.layout.w_out),
            b_out: leaf(tape, self.layout.b_out),
            slope: self.config.leaky_slope,
            feature_dropout: self.config.feature_dropout,
            attention_dropout: self.config.attention_dropout,
        };

        let mut dropout = Dropout::new(mode);
        let x = tape.input(graph.node_features.clone());
        let adj = graph.adjacencies().map(|a| tape.input(a.clone()));
        let (branch_out, gaf) = gaf_forward_on(tape, x, adj, &gaf_vars, &mut dropout)?;
        let mask = Arc::new(graph.attention_mask());
        let score = gat_forward_on(tape, gaf, &mask, &gat_vars, &mut dropout)?;
        Ok(ForwardVars {
            branches: branch_out,
            gaf,
            score,
        })
    }

    /// Score in normalized units.
    pub fn predict(&self, graph: &PcwGraph) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.forward_on(&mut tape, graph, Mode::Infer)?;
        Ok(tape.value(out.score).data[0])
    }

    /// Squared-error loss of one sample and its parameter gradients.
    pub fn sample_gradients(&self, graph: &PcwGraph, target: f64, mode: Mode) -> Result<(f64, Vec<Tensor2>)> {
        let mut tape = Tape::new();
        let out = self.forward_on(&mut tape, graph, mode)?;
        let pred = tape.value(out.score).data[0];
        let diff = pred - target;
        let grads = tape.backward(out.score, Tensor2::filled(1, 1, 2.0 * diff))?;
        let per_param = (0..self.params.len())
            .map(|i| {
                grads.param(i).unwrap_or_else(|| {
                    let p = self.params.get(i);
                    Tensor2::zeros(p.rows, p.cols)
                })
            })
            .collect();
        Ok((diff * diff, per_param))
    }

    /// Human-readable architecture table.
    pub fn describe(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        out.push_str(&format!("node features        {NODE_DIM}\n"));
        out.push_str(&format!(
            "fusion branches      3 ({})\n",
            BRANCH_NAMES.join(", ")
        ));
        out.push_str(&format!("  attention layers   {}\n", c.gaf_layers));
        out.push_str(&format!("  heads x d_k        {} x {}\n", c.gaf_heads, c.d_k));
        out.push_str(&format!(
            "  projection         {} -> {}, ReLU, dropout {}\n",
            3 * c.branch_width(),
            c.d_out,
            c.fusion_dropout
        ));
        out.push_str(&format!("GAT layers           {}\n", c.gat_heads.len()));
        out.push_str(&format!("  hidden per head    {}\n", c.gat_hidden));
        out.push_str(&format!("  heads per layer    {:?}\n", c.gat_heads));
        out.push_str("  activation         tanh\n");
        out.push_str(&format!("  LeakyReLU slope    {}\n", c.leaky_slope));
        out.push_str(&format!(
            "  dropout            feature {}, attention {}\n",
            c.feature_dropout, c.attention_dropout
        ));
        out.push_str("  residual           no\n");
        out.push_str("pooling              mean over nodes\n");
        out.push_str(&format!("output head          {} -> 1, linear\n", c.gat_hidden));
        out.push_str(&format!("parameters           {}\n", self.params.count()));
        out
    }
}
