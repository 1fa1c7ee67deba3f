//! A small reverse-mode automatic differentiation tape over 2-D `f64` matrices.
//!
//! Every forward computation in the crate builds a [`Graph`]: parameters are
//! pulled in by name from a [`ParamStore`], operations append nodes, and
//! [`Graph::backward`] walks the tape in reverse to produce gradients. The
//! tape is rebuilt for every step; nothing is retained between steps.
//!
//! Row vectors are `[1, n]` matrices and scalars are `[1, 1]`.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};

use crate::error::{MissError, Result};
use crate::params::ParamStore;

pub type Tensor = Array2<f64>;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_COEF: f64 = 0.044_715;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    DivScalar(Var, Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    Sum(Var),
    PickMean {
        logp: Var,
        targets: Vec<Option<usize>>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A tape that tracks gradients for parameters and inputs.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: BTreeMap::new(), grad_enabled: true }
    }

    /// A tape for forward-only evaluation; no node ever requires a gradient.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), params: BTreeMap::new(), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad: needs_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (used for inputs under gradient checks).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter leaf looked up by name. Repeated lookups return the same node,
    /// so every use of a parameter accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name).ok_or_else(|| MissError::UnknownParam(name.to_string()))?.clone();
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of every parameter pulled onto this tape, in sorted order.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Cuts the gradient path: the returned node has the same value but is a
    /// constant leaf.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dimensions");
        let value = va.dot(vb);
        let ng = self.needs(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let ng = self.needs(&[a]);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let value = self.value(a) + self.value(b);
        let ng = self.needs(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    /// `a[n, c] + row[1, c]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.nrows(), 1, "add_row expects a row vector");
        assert_eq!(va.ncols(), vr.ncols(), "add_row widths");
        let value = va + vr;
        let ng = self.needs(&[a, row]);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let value = self.value(a) * self.value(b);
        let ng = self.needs(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let ng = self.needs(&[a]);
        self.push(value, Op::Scale(a, k), ng)
    }

    /// Adds a constant (for example an additive attention mask).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        assert_eq!(self.shape(a), c.dim(), "add_const shapes");
        let value = self.value(a) + c;
        let ng = self.needs(&[a]);
        self.push(value, Op::AddConst(a), ng)
    }

    /// `a / s` where `s` is a `[1, 1]` node.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "div_scalar expects a scalar divisor");
        let d = self.scalar(s);
        let value = self.value(a) / d;
        let ng = self.needs(&[a, s]);
        self.push(value, Op::DivScalar(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let ng = self.needs(&[a]);
        self.push(value, Op::Gelu(a), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let ng = self.needs(&[a]);
        self.push(value, Op::Softmax(a), ng)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let lse = log_sum_exp(row.iter().copied());
            row.mapv_inplace(|v| v - lse);
        }
        let ng = self.needs(&[a]);
        self.push(value, Op::LogSoftmax(a), ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`[1, c]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let c = vx.ncols();
        assert_eq!(self.shape(gamma), (1, c), "layer_norm gamma");
        assert_eq!(self.shape(beta), (1, c), "layer_norm beta");
        let mut xhat = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.needs(&[x, gamma, beta]);
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Tensor::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < t.nrows(), "gather index {id} out of range");
            value.row_mut(r).assign(&t.row(id));
        }
        let ng = self.needs(&[table]);
        self.push(value, Op::Gather { table, ids: ids.to_vec() }, ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![start..end, ..]).to_owned();
        let ng = self.needs(&[x]);
        self.push(value, Op::SliceRows { x, start }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![.., start..end]).to_owned();
        let ng = self.needs(&[x]);
        self.push(value, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat_rows of nothing");
        let views: Vec<_> = xs.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows widths");
        let ng = self.needs(xs);
        self.push(value, Op::ConcatRows(xs.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat_cols of nothing");
        let views: Vec<_> = xs.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols heights");
        let ng = self.needs(xs);
        self.push(value, Op::ConcatCols(xs.to_vec()), ng)
    }

    /// Divides each row by `max(‖row‖, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt().max(eps);
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        let ng = self.needs(&[x]);
        self.push(value, Op::L2Normalize { x, norms, eps }, ng)
    }

    /// Sum of all entries as a `[1, 1]` node.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::from_elem((1, 1), self.value(x).sum());
        let ng = self.needs(&[x]);
        self.push(value, Op::Sum(x), ng)
    }

    /// Negative mean of `logp[i, target_i]` over rows whose target is `Some`.
    /// Evaluates to 0 when no row has a target.
    pub fn nll_mean(&mut self, logp: Var, targets: &[Option<usize>]) -> Var {
        let lp = self.value(logp);
        assert_eq!(lp.nrows(), targets.len(), "nll targets length");
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                total -= lp[[i, t]];
                count += 1;
            }
        }
        let value = Tensor::from_elem((1, 1), if count == 0 { 0.0 } else { total / count as f64 });
        let ng = self.needs(&[logp]) && count > 0;
        self.push(value, Op::PickMean { logp, targets: targets.to_vec(), count }, ng)
    }

    /// Reverse pass from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::ones(self.nodes[root.0].value.dim()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, &g * *k),
                Op::AddConst(a) => accumulate(&mut grads, *a, g.clone()),
                Op::DivScalar(a, sv) => {
                    let d = self.scalar(*sv);
                    let gs = -(&g * self.value(*a)).sum() / (d * d);
                    accumulate(&mut grads, *a, &g / d);
                    accumulate(&mut grads, *sv, Tensor::from_elem((1, 1), gs));
                }
                Op::Gelu(a) => {
                    let ga = ndarray::Zip::from(&g).and(self.value(*a)).map_collect(|&g, &x| g * gelu_grad(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.dim());
                    for ((mut out, gr), yr) in ga.rows_mut().into_iter().zip(g.rows()).zip(y.rows()) {
                        let dot = gr.dot(&yr);
                        ndarray::Zip::from(&mut out).and(&gr).and(&yr).for_each(|o, &gv, &yv| *o = yv * (gv - dot));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.dim());
                    for ((mut out, gr), yr) in ga.rows_mut().into_iter().zip(g.rows()).zip(y.rows()) {
                        let gsum = gr.sum();
                        ndarray::Zip::from(&mut out).and(&gr).and(&yr).for_each(|o, &gv, &lv| *o = gv - lv.exp() * gsum);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gam = self.value(*gamma);
                    accumulate(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    if self.nodes[x.0].needs_grad {
                        let dxhat = &g * gam;
                        let c = xhat.ncols() as f64;
                        let mut gx = Tensor::zeros(xhat.dim());
                        for (r, mut out) in gx.rows_mut().into_iter().enumerate() {
                            let dr = dxhat.row(r);
                            let xr = xhat.row(r);
                            let sum_d = dr.sum();
                            let sum_dx = dr.dot(&xr);
                            let is = inv_std[r];
                            for j in 0..out.len() {
                                out[j] = is / c * (c * dr[j] - sum_d - xr[j] * sum_dx);
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::Gather { table, ids } => {
                    let mut gt = Tensor::zeros(self.value(*table).dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = gt.row_mut(id);
                        row += &g.row(r);
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::SliceRows { x, start } => {
                    let mut gx = Tensor::zeros(self.value(*x).dim());
                    gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let mut gx = Tensor::zeros(self.value(*x).dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatRows(xs) => {
                    let mut off = 0;
                    for x in xs {
                        let n = self.value(*x).nrows();
                        accumulate(&mut grads, *x, g.slice(s![off..off + n, ..]).to_owned());
                        off += n;
                    }
                }
                Op::ConcatCols(xs) => {
                    let mut off = 0;
                    for x in xs {
                        let n = self.value(*x).ncols();
                        accumulate(&mut grads, *x, g.slice(s![.., off..off + n]).to_owned());
                        off += n;
                    }
                }
                Op::L2Normalize { x, norms, eps } => {
                    let y = &node.value;
                    let raw = self.value(*x);
                    let mut gx = Tensor::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let n = norms[r];
                        let gr = g.row(r);
                        let raw_norm = raw.row(r).dot(&raw.row(r)).sqrt();
                        if raw_norm > *eps {
                            let yr = y.row(r);
                            let dot = gr.dot(&yr);
                            for j in 0..y.ncols() {
                                gx[[r, j]] = (gr[j] - yr[j] * dot) / n;
                            }
                        } else {
                            for j in 0..y.ncols() {
                                gx[[r, j]] = gr[j] / n;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let k = g[[0, 0]];
                    accumulate(&mut grads, *x, Tensor::from_elem(self.value(*x).dim(), k));
                }
                Op::PickMean { logp, targets, count } => {
                    let k = g[[0, 0]] / *count as f64;
                    let mut gl = Tensor::zeros(self.value(*logp).dim());
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            gl[[i, t]] -= k;
                        }
                    }
                    accumulate(&mut grads, *logp, gl);
                }
            }
            // Keep parameter and input gradients readable after the sweep.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.needs_grad {
                *slot = None;
            }
        }
        Grads { grads }
    }

    /// Gradients of every parameter on the tape, keyed by name. Parameters
    /// that received no gradient get zeros.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &v)| (name.clone(), grads.get_or_zeros(v, self.shape(v))))
            .collect()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let t = (c * (x + GELU_COEF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}
