//! Reverse-mode differentiation over a fixed set of primitives.
//!
//! Every value is a row-major `rows × cols` block of `f64`. Column vectors
//! are `n × 1`, scalars `1 × 1`. Operations are recorded in evaluation
//! order and the backward pass walks them in exact reverse.

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `y = x Wᵀ + b` with `W: out × in`, `b: 1 × out`.
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    Concat(Vec<Var>),
    Gather { x: Var, idx: Vec<usize> },
    Segment { x: Var, ptr: Vec<usize>, mean: bool },
    /// Column vector `y_k = x[idx_k]`, or a constant when `idx_k` is `None`.
    Select { x: Var, idx: Vec<Option<usize>> },
    Zeta { x: Var, mask: Vec<bool>, eps: f64, relaxed: bool },
    /// `y = M x` where `M` has the given pattern and values from `values`.
    SpMV { values: Var, x: Var, pattern: CsrMatrix },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    SquaredNorm(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of one scalar output with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Gradient for `v`, zeros if nothing flowed into it.
    pub fn get(&self, v: Var) -> Vec<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.sizes[v.0]])
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// The single entry of a `1 × 1` value.
    pub fn scalar(&self, v: Var) -> f64 {
        assert_eq!(self.shape(v), (1, 1), "not a scalar");
        self.nodes[v.0].data[0]
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node {
            op,
            rows,
            cols,
            data,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(data.len(), rows * cols, "leaf shape");
        self.push(Op::Leaf, rows, cols, data)
    }

    pub fn column(&mut self, data: Vec<f64>) -> Var {
        let n = data.len();
        self.leaf(n, 1, data)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (rows, k) = self.shape(x);
        let (out, k2) = self.shape(w);
        assert_eq!(k, k2, "affine inner dimension");
        assert_eq!(self.shape(b), (1, out), "affine bias shape");
        let (xd, wd, bd) = (self.value(x), self.value(w), self.value(b));
        let mut y = Vec::with_capacity(rows * out);
        for r in 0..rows {
            let xr = &xd[r * k..(r + 1) * k];
            for o in 0..out {
                let wr = &wd[o * k..(o + 1) * k];
                y.push(bd[o] + dot(xr, wr));
            }
        }
        self.push(Op::Affine { x, w, b }, rows, out, y)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let y = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(Op::Relu(x), r, c, y)
    }

    /// Column-wise concatenation of blocks with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.shape(p).0, rows, "concat row count");
                self.shape(p).1
            })
            .collect();
        let cols: usize = widths.iter().sum();
        let mut y = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                y.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        self.push(Op::Concat(parts.to_vec()), rows, cols, y)
    }

    /// `y[r] = x[idx[r]]` row-wise.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Var {
        let (_, c) = self.shape(x);
        let xd = self.value(x);
        let mut y = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            y.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        self.push(
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            idx.len(),
            c,
            y,
        )
    }

    /// Row `i` of the result reduces rows `ptr[i]..ptr[i+1]` of `x`.
    /// Empty segments give zero.
    pub fn segment(&mut self, x: Var, ptr: &[usize], mean: bool) -> Var {
        let (_, c) = self.shape(x);
        let xd = self.value(x);
        let segs = ptr.len() - 1;
        let mut y = vec![0.0; segs * c];
        for s in 0..segs {
            let out = &mut y[s * c..(s + 1) * c];
            for r in ptr[s]..ptr[s + 1] {
                out.iter_mut().zip(&xd[r * c..(r + 1) * c]).for_each(|(o, v)| *o += v);
            }
            let count = ptr[s + 1] - ptr[s];
            if mean && count > 0 {
                out.iter_mut().for_each(|o| *o /= count as f64);
            }
        }
        self.push(
            Op::Segment {
                x,
                ptr: ptr.to_vec(),
                mean,
            },
            segs,
            c,
            y,
        )
    }

    pub fn select(&mut self, x: Var, idx: &[Option<usize>], fill: f64) -> Var {
        assert_eq!(self.shape(x).1, 1, "select needs a column");
        let xd = self.value(x);
        let y = idx.iter().map(|k| k.map_or(fill, |k| xd[k])).collect();
        self.push(
            Op::Select {
                x,
                idx: idx.to_vec(),
            },
            idx.len(),
            1,
            y,
        )
    }

    /// Applies the diagonal guard (hard or relaxed) where `mask` is set.
    pub fn zeta(&mut self, x: Var, mask: &[bool], eps: f64, relaxed: bool) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(mask.len(), r * c, "zeta mask length");
        let y = self
            .value(x)
            .iter()
            .zip(mask)
            .map(|(&v, &m)| match (m, relaxed) {
                (false, _) => v,
                (true, false) => super::zeta(v, eps),
                (true, true) => super::zeta_relaxed(v, eps),
            })
            .collect();
        self.push(
            Op::Zeta {
                x,
                mask: mask.to_vec(),
                eps,
                relaxed,
            },
            r,
            c,
            y,
        )
    }

    /// `M x` where `M` takes the pattern of `pattern` and the values of the
    /// column `values` (one per stored entry).
    pub fn spmv(&mut self, values: Var, pattern: &CsrMatrix, x: Var) -> Var {
        assert_eq!(self.shape(values), (pattern.nnz(), 1), "spmv values");
        assert_eq!(self.shape(x), (pattern.n(), 1), "spmv input");
        let (vd, xd) = (self.value(values), self.value(x));
        let rp = pattern.row_ptr();
        let ci = pattern.col_idx();
        let y = (0..pattern.n())
            .map(|i| (rp[i]..rp[i + 1]).map(|p| vd[p] * xd[ci[p]]).sum())
            .collect();
        self.push(
            Op::SpMV {
                values,
                x,
                pattern: pattern.clone(),
            },
            pattern.n(),
            1,
            y,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.binary_shape(a, b);
        let y = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(Op::Add(a, b), r, c, y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.binary_shape(a, b);
        let y = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        self.push(Op::Sub(a, b), r, c, y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (rows, cols) = self.shape(a);
        let y = self.value(a).iter().map(|v| c * v).collect();
        self.push(Op::Scale(a, c), rows, cols, y)
    }

    pub fn squared_norm(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|v| v * v).sum();
        self.push(Op::SquaredNorm(a), 1, 1, vec![s])
    }

    fn binary_shape(&self, a: Var, b: Var) -> (usize, usize) {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shapes");
        self.shape(a)
    }

    /// Reverse pass from the scalar `out` with upstream gradient `seed`.
    /// A tape supports exactly one backward pass.
    pub fn backward(&mut self, out: Var, seed: f64) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        let sizes: Vec<usize> = self.nodes.iter().map(|n| n.data.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![seed]);

        for id in (0..=out.0).rev() {
            let Some(gy) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(gy);
                    continue;
                }
                Op::Affine { x, w, b } => {
                    let (rows, k) = self.shape(*x);
                    let out_w = node.cols;
                    let (xd, wd) = (self.value(*x), self.value(*w));
                    let gx = slot(&mut grads, &sizes, *x);
                    for r in 0..rows {
                        let g = &gy[r * out_w..(r + 1) * out_w];
                        let gxr = &mut gx[r * k..(r + 1) * k];
                        for (o, &go) in g.iter().enumerate() {
                            if go != 0.0 {
                                axpy(go, &wd[o * k..(o + 1) * k], gxr);
                            }
                        }
                    }
                    let gw = slot(&mut grads, &sizes, *w);
                    for r in 0..rows {
                        let xr = &xd[r * k..(r + 1) * k];
                        for o in 0..out_w {
                            let go = gy[r * out_w + o];
                            if go != 0.0 {
                                axpy(go, xr, &mut gw[o * k..(o + 1) * k]);
                            }
                        }
                    }
                    let gb = slot(&mut grads, &sizes, *b);
                    for r in 0..rows {
                        axpy(1.0, &gy[r * out_w..(r + 1) * out_w], gb);
                    }
                }
                Op::Relu(x) => {
                    let xd = self.value(*x);
                    let gx = slot(&mut grads, &sizes, *x);
                    for ((g, &v), &u) in gx.iter_mut().zip(xd).zip(&gy) {
                        if v > 0.0 {
                            *g += u;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let rows = node.rows;
                    let cols = node.cols;
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        let gp = slot(&mut grads, &sizes, p);
                        for r in 0..rows {
                            axpy(
                                1.0,
                                &gy[r * cols + offset..r * cols + offset + w],
                                &mut gp[r * w..(r + 1) * w],
                            );
                        }
                        offset += w;
                    }
                }
                Op::Gather { x, idx } => {
                    let c = node.cols;
                    let gx = slot(&mut grads, &sizes, *x);
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(1.0, &gy[r * c..(r + 1) * c], &mut gx[i * c..(i + 1) * c]);
                    }
                }
                Op::Segment { x, ptr, mean } => {
                    let c = node.cols;
                    let gx = slot(&mut grads, &sizes, *x);
                    for s in 0..ptr.len() - 1 {
                        let count = ptr[s + 1] - ptr[s];
                        let f = if *mean && count > 0 { 1.0 / count as f64 } else { 1.0 };
                        for r in ptr[s]..ptr[s + 1] {
                            axpy(f, &gy[s * c..(s + 1) * c], &mut gx[r * c..(r + 1) * c]);
                        }
                    }
                }
                Op::Select { x, idx } => {
                    let gx = slot(&mut grads, &sizes, *x);
                    for (k, i) in idx.iter().enumerate() {
                        if let Some(i) = i {
                            gx[*i] += gy[k];
                        }
                    }
                }
                Op::Zeta {
                    x,
                    mask,
                    eps,
                    relaxed,
                } => {
                    let xd = self.value(*x);
                    let gx = slot(&mut grads, &sizes, *x);
                    for (k, g) in gx.iter_mut().enumerate() {
                        let d = match (mask[k], relaxed) {
                            (false, _) => 1.0,
                            (true, false) => {
                                if xd[k].abs() > *eps {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            (true, true) => super::zeta_relaxed_derivative(xd[k], *eps),
                        };
                        *g += d * gy[k];
                    }
                }
                Op::SpMV { values, x, pattern } => {
                    let rp = pattern.row_ptr();
                    let ci = pattern.col_idx();
                    let (vd, xd) = (self.value(*values), self.value(*x));
                    let gv = slot(&mut grads, &sizes, *values);
                    for i in 0..pattern.n() {
                        for p in rp[i]..rp[i + 1] {
                            gv[p] += gy[i] * xd[ci[p]];
                        }
                    }
                    let gx = slot(&mut grads, &sizes, *x);
                    for i in 0..pattern.n() {
                        for p in rp[i]..rp[i + 1] {
                            gx[ci[p]] += vd[p] * gy[i];
                        }
                    }
                }
                Op::Add(a, b) => {
                    axpy(1.0, &gy, slot(&mut grads, &sizes, *a));
                    axpy(1.0, &gy, slot(&mut grads, &sizes, *b));
                }
                Op::Sub(a, b) => {
                    axpy(1.0, &gy, slot(&mut grads, &sizes, *a));
                    axpy(-1.0, &gy, slot(&mut grads, &sizes, *b));
                }
                Op::Scale(a, c) => {
                    axpy(*c, &gy, slot(&mut grads, &sizes, *a));
                }
                Op::SquaredNorm(a) => {
                    let ad = self.value(*a);
                    let ga = slot(&mut grads, &sizes, *a);
                    axpy(2.0 * gy[0], ad, ga);
                }
            }
        }
        Ok(Gradients { grads, sizes })
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], sizes: &[usize], v: Var) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; sizes[v.0]])
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}
