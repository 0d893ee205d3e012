//! Message-passing network that maps a matrix to triangular factors.

pub mod tape;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CoatesGraph, EDGE_FEATURES, NODE_FEATURES};
use crate::precond::FactorPair;
use crate::sparse::CsrMatrix;
pub use tape::{Gradients, Tape, Var};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_EPS: f64 = 1e-4;

/// Hard diagonal guard: values inside `[-eps, eps]` are pushed to `±eps`
/// (zero goes to `+eps`).
pub fn zeta(x: f64, eps: f64) -> f64 {
    if x.abs() > eps {
        x
    } else if x >= 0.0 {
        eps
    } else {
        -eps
    }
}

/// Smooth surrogate of [`zeta`] used while training.
pub fn zeta_relaxed(x: f64, eps: f64) -> f64 {
    x * (1.0 + (2.0 - (4.0 * x / eps).abs()).exp())
}

pub fn zeta_relaxed_derivative(x: f64, eps: f64) -> f64 {
    let t = 4.0 * x.abs() / eps;
    1.0 + (2.0 - t).exp() * (1.0 - t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Sum,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            _ => Err(Error::Config(format!("unknown aggregation `{s}` (mean|sum)"))),
        }
    }
}

/// `Train` assembles the diagonal with the smooth guard, `Inference` with
/// the hard one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: usize,
    pub edge_hidden: usize,
    pub node_hidden: usize,
    /// Width of the edge and node embeddings between layers.
    pub embed: usize,
    pub aggregation: Aggregation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            layers: 3,
            edge_hidden: 32,
            node_hidden: 16,
            embed: 8,
            aggregation: Aggregation::Mean,
        }
    }
}

impl Architecture {
    fn edge_in(&self, layer: usize) -> usize {
        if layer == 0 {
            EDGE_FEATURES
        } else {
            // embedding plus the skip-connected matrix value
            self.embed + 1
        }
    }

    fn node_in(&self, layer: usize) -> usize {
        if layer == 0 {
            NODE_FEATURES
        } else {
            self.embed
        }
    }

    fn is_final(&self, layer: usize) -> bool {
        layer + 1 == self.layers
    }

    /// `(name, rows, cols)` for every tensor, in storage order.
    fn tensor_shapes(&self) -> Vec<(String, usize, usize)> {
        let mut shapes = Vec::new();
        for l in 0..self.layers {
            let e_out = if self.is_final(l) { 1 } else { self.embed };
            let psi_in = self.edge_in(l) + 2 * self.node_in(l);
            shapes.push((format!("layer{l}.edge.w1"), self.edge_hidden, psi_in));
            shapes.push((format!("layer{l}.edge.b1"), 1, self.edge_hidden));
            shapes.push((format!("layer{l}.edge.w2"), e_out, self.edge_hidden));
            shapes.push((format!("layer{l}.edge.b2"), 1, e_out));
            if !self.is_final(l) {
                let phi_in = self.node_in(l) + self.embed;
                shapes.push((format!("layer{l}.node.w1"), self.node_hidden, phi_in));
                shapes.push((format!("layer{l}.node.b1"), 1, self.node_hidden));
                shapes.push((format!("layer{l}.node.w2"), self.embed, self.node_hidden));
                shapes.push((format!("layer{l}.node.b2"), 1, self.embed));
            }
        }
        shapes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub format_version: u32,
    pub eps: f64,
    pub arch: Architecture,
    pub param_count: usize,
    pub tensors: Vec<NamedTensor>,
}

/// Two-layer perceptron weights as tape handles.
#[derive(Debug, Clone, Copy)]
struct Mlp {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl Mlp {
    fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = tape.affine(x, self.w1, self.b1);
        let h = tape.relu(h);
        tape.affine(h, self.w2, self.b2)
    }
}

impl ModelParams {
    /// Weights uniform in `±1/√fan_in`, zero biases.
    pub fn init(arch: Architecture, eps: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = arch
            .tensor_shapes()
            .into_iter()
            .map(|(name, rows, cols)| {
                let data = if name.ends_with(".w1") || name.ends_with(".w2") {
                    let bound = 1.0 / (cols as f64).sqrt();
                    (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect()
                } else {
                    vec![0.0; rows * cols]
                };
                NamedTensor {
                    name,
                    rows,
                    cols,
                    data,
                }
            })
            .collect();
        Self::from_tensors(arch, eps, tensors).expect("shapes are generated")
    }

    /// Every tensor set to zero.
    pub fn zeros(arch: Architecture, eps: f64) -> Self {
        let mut p = Self::init(arch, eps, 0);
        p.tensors.iter_mut().for_each(|t| t.data.iter_mut().for_each(|v| *v = 0.0));
        p
    }

    pub fn from_tensors(arch: Architecture, eps: f64, tensors: Vec<NamedTensor>) -> Result<Self> {
        let p = Self {
            format_version: FORMAT_VERSION,
            eps,
            arch,
            param_count: tensors.iter().map(|t| t.data.len()).sum(),
            tensors,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "model format version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("model eps must be positive, got {}", self.eps)));
        }
        if self.arch.layers == 0 {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        let shapes = self.arch.tensor_shapes();
        if shapes.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "model has {} tensors, architecture needs {}",
                self.tensors.len(),
                shapes.len()
            )));
        }
        for ((name, rows, cols), t) in shapes.iter().zip(&self.tensors) {
            if &t.name != name || t.rows != *rows || t.cols != *cols || t.data.len() != rows * cols {
                return Err(Error::Config(format!(
                    "tensor `{}` ({}x{}) does not match expected `{name}` ({rows}x{cols})",
                    t.name, t.rows, t.cols
                )));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("tensor `{name}` has non-finite entries")));
            }
        }
        let count: usize = self.tensors.iter().map(|t| t.data.len()).sum();
        if count != self.param_count {
            return Err(Error::Config(format!(
                "declared parameter count {} differs from stored {count}",
                self.param_count
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// All parameters flattened in storage order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count);
        let mut off = 0;
        for t in &mut self.tensors {
            let k = t.data.len();
            t.data.copy_from_slice(&flat[off..off + k]);
            off += k;
        }
    }
}

/// Factor values recorded on a tape, ready for losses.
#[derive(Debug, Clone)]
pub struct TapedFactors {
    /// Leaf handles of the parameters, in [`ModelParams::tensors`] order.
    pub params: Vec<Var>,
    /// Scalar edge outputs of the last layer.
    pub edge_out: Var,
    /// Values of `L` in the storage order of `lower_pattern`.
    pub lower: Var,
    /// Values of `U` in the storage order of `upper_pattern`.
    pub upper: Var,
    pub lower_pattern: CsrMatrix,
    pub upper_pattern: CsrMatrix,
    pub eps: f64,
}

impl TapedFactors {
    pub fn factor_pair(&self, tape: &Tape) -> Result<FactorPair> {
        let lower = self.lower_pattern.with_values(tape.value(self.lower).to_vec())?;
        let upper = self.upper_pattern.with_values(tape.value(self.upper).to_vec())?;
        FactorPair::new(lower, upper, self.eps, "learned")
    }

    /// `P v = L (U v)` on the tape.
    pub fn apply(&self, tape: &mut Tape, v: Var) -> Var {
        let t = tape.spmv(self.upper, &self.upper_pattern, v);
        tape.spmv(self.lower, &self.lower_pattern, t)
    }

    /// Flattened parameter gradients in storage order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<f64> {
        self.params.iter().flat_map(|&v| grads.get(v)).collect()
    }
}

fn check_finite(tape: &Tape, v: Var, layer: usize, what: &str) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence(format!("non-finite {what} activation in layer {layer}")))
    }
}

/// One round: edge update from `[e_ij, n_i, n_j]`, aggregation of the new
/// edge embeddings into their destination row, node update from `[n_i, m_i]`.
/// The node update is skipped when `phi` is `None`.
fn message_passing(
    tape: &mut Tape,
    graph: &CoatesGraph,
    edges: Var,
    nodes: Var,
    psi: Mlp,
    phi: Option<Mlp>,
    aggregation: Aggregation,
) -> (Var, Option<Var>) {
    let ni = tape.gather(nodes, graph.edge_rows());
    let nj = tape.gather(nodes, graph.edge_cols());
    let input = tape.concat(&[edges, ni, nj]);
    let e_new = psi.forward(tape, input);
    let n_new = phi.map(|phi| {
        let m = tape.segment(e_new, graph.pattern().row_ptr(), aggregation == Aggregation::Mean);
        let input = tape.concat(&[nodes, m]);
        phi.forward(tape, input)
    });
    (e_new, n_new)
}

/// Records the full network and factor assembly on `tape`.
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    graph: &CoatesGraph,
    mode: Mode,
) -> Result<TapedFactors> {
    let arch = params.arch;
    let vars: Vec<Var> = params
        .tensors
        .iter()
        .map(|t| tape.leaf(t.rows, t.cols, t.data.clone()))
        .collect();
    let e0: Vec<f64> = graph.edge_feats().iter().flatten().copied().collect();
    let n0: Vec<f64> = graph.node_feats().iter().flatten().copied().collect();
    let mut edges = tape.leaf(graph.num_edges(), EDGE_FEATURES, e0);
    let mut nodes = tape.leaf(graph.n(), NODE_FEATURES, n0);
    let skip = tape.column(graph.edge_feats().iter().map(|e| e[0]).collect());

    let mut cursor = 0;
    let mut take = || {
        let m = Mlp {
            w1: vars[cursor],
            b1: vars[cursor + 1],
            w2: vars[cursor + 2],
            b2: vars[cursor + 3],
        };
        cursor += 4;
        m
    };
    for l in 0..arch.layers {
        let psi = take();
        let phi = (!arch.is_final(l)).then(&mut take);
        let (e, n) = message_passing(tape, graph, edges, nodes, psi, phi, arch.aggregation);
        check_finite(tape, e, l, "edge")?;
        if let Some(n) = n {
            check_finite(tape, n, l, "node")?;
            nodes = n;
            edges = tape.concat(&[e, skip]);
        } else {
            edges = e;
        }
    }

    let lower_map = graph.lower();
    let upper_map = graph.upper();
    let lower_idx: Vec<Option<usize>> = lower_map.edges.iter().map(|&k| Some(k)).collect();
    let lower_raw = tape.select(edges, &lower_idx, 0.0);
    let lower = tape.zeta(lower_raw, &lower_map.diagonal, params.eps, mode == Mode::Train);
    let upper_idx: Vec<Option<usize>> = upper_map
        .edges
        .iter()
        .zip(&upper_map.diagonal)
        .map(|(&k, &d)| (!d).then_some(k))
        .collect();
    let upper = tape.select(edges, &upper_idx, 1.0);
    check_finite(tape, lower, arch.layers - 1, "diagonal")?;

    Ok(TapedFactors {
        params: vars,
        edge_out: edges,
        lower,
        upper,
        lower_pattern: lower_map.pattern.clone(),
        upper_pattern: upper_map.pattern.clone(),
        eps: params.eps,
    })
}

/// Learned factors for `graph`.
pub fn forward(params: &ModelParams, graph: &CoatesGraph, mode: Mode) -> Result<FactorPair> {
    let mut tape = Tape::new();
    let f = forward_on_tape(&mut tape, params, graph, mode)?;
    f.factor_pair(&tape)
}

/// Learned preconditioner for a matrix, built in inference mode.
pub fn learned_preconditioner(params: &ModelParams, a: &CsrMatrix) -> Result<FactorPair> {
    forward(params, &CoatesGraph::from_matrix(a), Mode::Inference)
}
