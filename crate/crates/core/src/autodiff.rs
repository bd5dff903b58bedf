//! Tape-based reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every primitive applied to its nodes. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and adds
//! `d root / d leaf` into the gradient slot of every trainable leaf. Leaf
//! gradients accumulate across calls until [`Graph::zero_grad`].
//!
//! Broadcasting is limited to adding a 1-D bias over the last axis.

use ndarray::{s, Array1, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Zip};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for axis of length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-supplied primitive: given the output gradient and
/// the input values, returns one gradient per input.
pub type CustomBackward = Arc<dyn Fn(&ArrayD<f64>, &[&ArrayD<f64>]) -> Vec<ArrayD<f64>> + Send + Sync>;

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Exp(Var),
    Gelu(Var),
    GatherRows(Var, Vec<usize>),
    PickColumns(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Reshape(Var),
    SliceColumns(Var, usize, usize),
    ConcatColumns(Vec<Var>),
    Sum(Var),
    Mean(Var),
    WeightedSum(Var, ArrayD<f64>),
    ClippedSurrogate {
        ratio: Var,
        advantages: Array1<f64>,
        epsilon: f64,
    },
    Custom(Vec<Var>, CustomBackward),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// A computation graph (tape).
///
/// Nodes are appended in evaluation order, so the tape is acyclic by
/// construction.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<ArrayD<f64>>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

fn as2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("caller checked rank 2")
}

fn rank2(op: &'static str, a: &ArrayD<f64>) -> Result<()> {
    if a.ndim() == 2 {
        Ok(())
    } else {
        Err(AutodiffError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: vec![],
        })
    }
}

fn same_shape(op: &'static str, a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(AutodiffError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Row-wise softmax of a 2-D array. Rows may contain `-inf` entries as long
/// as at least one entry per row is finite.
pub fn softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z: f64 = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

pub fn log_softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Normalizes each row to zero mean and unit (population) variance, then
/// applies `gain` and `bias`. Returns `(y, xhat, inv_std)`.
pub fn layer_norm_rows(
    x: ArrayView2<f64>,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let (n, d) = x.dim();
    let mut xhat = Array2::zeros((n, d));
    let mut y = Array2::zeros((n, d));
    let mut inv_std = Array1::zeros(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[i] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[[i, j]] = h;
            y[[i, j]] = h * gain[j] + bias[j];
        }
    }
    (y, xhat, inv_std)
}

fn accumulate(slot: &mut Option<ArrayD<f64>>, g: ArrayD<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: ArrayD<f64>, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        val.iter().copied().next().unwrap_or(0.0)
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        rank2("matmul", av)?;
        rank2("matmul", bv)?;
        if av.shape()[1] != bv.shape()[0] {
            return Err(AutodiffError::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let out = as2(av).dot(&as2(bv)).into_dyn();
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        rank2("transpose", av)?;
        let out = as2(av).t().as_standard_layout().into_owned().into_dyn();
        Ok(self.push_op(out, Op::Transpose(a), &[a]))
    }

    /// Elementwise sum of equal shapes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let out = av + bv;
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a 1-D `bias` to every row of `a` (over the last axis).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.ndim() != 1 || av.ndim() == 0 || av.shape()[av.ndim() - 1] != bv.len() {
            return Err(AutodiffError::Shape {
                op: "add_bias",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let out = av + bv;
        Ok(self.push_op(out, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let out = av * bv;
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push_op(out, Op::Scale(a, c), &[a])
    }

    /// Softmax over the last axis of a 1-D or 2-D array.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.rowwise("softmax", a, softmax_rows)?;
        Ok(self.push_op(out, Op::Softmax(a), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.rowwise("log_softmax", a, log_softmax_rows)?;
        Ok(self.push_op(out, Op::LogSoftmax(a), &[a]))
    }

    fn rowwise(
        &self,
        op: &'static str,
        a: Var,
        f: fn(ArrayView2<f64>) -> Array2<f64>,
    ) -> Result<ArrayD<f64>> {
        let av = self.value(a);
        match av.ndim() {
            1 => {
                let n = av.len();
                let v = av.view().into_shape_with_order((1, n)).expect("1-D view");
                Ok(f(v).into_shape_with_order(IxDyn(&[n])).expect("same size"))
            }
            2 => Ok(f(as2(av)).into_dyn()),
            _ => Err(AutodiffError::Shape {
                op,
                lhs: av.shape().to_vec(),
                rhs: vec![],
            }),
        }
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push_op(out, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push_op(out, Op::Exp(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push_op(out, Op::Gelu(a), &[a])
    }

    /// Selects rows of a 2-D table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        rank2("gather_rows", tv)?;
        let t = as2(tv);
        let n = t.nrows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(AutodiffError::Index {
                op: "gather_rows",
                index: bad,
                len: n,
            });
        }
        let out = t.select(Axis(0), rows).into_dyn();
        Ok(self.push_op(out, Op::GatherRows(table, rows.to_vec()), &[table]))
    }

    /// Picks `a[i, cols[i]]` for every row, giving a 1-D array.
    pub fn pick_columns(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let av = self.value(a);
        rank2("pick_columns", av)?;
        let m = as2(av);
        if m.nrows() != cols.len() {
            return Err(AutodiffError::Shape {
                op: "pick_columns",
                lhs: av.shape().to_vec(),
                rhs: vec![cols.len()],
            });
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= m.ncols()) {
            return Err(AutodiffError::Index {
                op: "pick_columns",
                index: bad,
                len: m.ncols(),
            });
        }
        let out = Array1::from_iter(cols.iter().enumerate().map(|(i, &c)| m[[i, c]])).into_dyn();
        Ok(self.push_op(out, Op::PickColumns(a, cols.to_vec()), &[a]))
    }

    /// Row-wise layer normalization with 1-D gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        rank2("layer_norm", xv)?;
        let d = xv.shape()[1];
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(AutodiffError::Shape {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let g = gv.as_slice().expect("contiguous gain").to_vec();
        let b = bv.as_slice().expect("contiguous bias").to_vec();
        let (y, xhat, inv_std) = layer_norm_rows(as2(xv), &g, &b, eps);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push_op(y.into_dyn(), op, &[x, gain, bias]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let n: usize = shape.iter().product();
        if n != av.len() {
            return Err(AutodiffError::Shape {
                op: "reshape",
                lhs: av.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = av
            .to_shape(IxDyn(shape))
            .expect("sizes checked")
            .into_owned();
        Ok(self.push_op(out, Op::Reshape(a), &[a]))
    }

    /// Columns `start..end` of a 2-D array.
    pub fn slice_columns(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        rank2("slice_columns", av)?;
        let cols = av.shape()[1];
        if start >= end || end > cols {
            return Err(AutodiffError::Index {
                op: "slice_columns",
                index: end,
                len: cols,
            });
        }
        let out = as2(av).slice(s![.., start..end]).to_owned().into_dyn();
        Ok(self.push_op(out, Op::SliceColumns(a, start, end), &[a]))
    }

    pub fn concat_columns(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::Invalid("concat_columns of nothing".into()));
        }
        let rows = self.value(parts[0]).shape().first().copied().unwrap_or(0);
        let mut views = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            rank2("concat_columns", v)?;
            if v.shape()[0] != rows {
                return Err(AutodiffError::Shape {
                    op: "concat_columns",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            views.push(as2(v));
        }
        let out = ndarray::concatenate(Axis(1), &views)
            .expect("row counts checked")
            .into_dyn();
        Ok(self.push_op(out, Op::ConcatColumns(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        self.push_op(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(AutodiffError::Invalid("mean of an empty array".into()));
        }
        let out = ArrayD::from_elem(IxDyn(&[]), av.sum() / av.len() as f64);
        Ok(self.push_op(out, Op::Mean(a), &[a]))
    }

    /// `sum(weights * a)` with constant weights of the same shape.
    pub fn weighted_sum(&mut self, a: Var, weights: ArrayD<f64>) -> Result<Var> {
        let av = self.value(a);
        same_shape("weighted_sum", av, &weights)?;
        let total = Zip::from(av).and(&weights).fold(0.0, |acc, &x, &w| acc + x * w);
        let out = ArrayD::from_elem(IxDyn(&[]), total);
        Ok(self.push_op(out, Op::WeightedSum(a, weights), &[a]))
    }

    /// Elementwise `min(r * A, clip(r, 1 - eps, 1 + eps) * A)` for a 1-D
    /// ratio vector and constant per-element advantages.
    pub fn clipped_surrogate(
        &mut self,
        ratio: Var,
        advantages: &[f64],
        epsilon: f64,
    ) -> Result<Var> {
        let rv = self.value(ratio);
        if rv.ndim() != 1 || rv.len() != advantages.len() {
            return Err(AutodiffError::Shape {
                op: "clipped_surrogate",
                lhs: rv.shape().to_vec(),
                rhs: vec![advantages.len()],
            });
        }
        let out = Array1::from_iter(
            rv.iter()
                .zip(advantages)
                .map(|(&r, &a)| (r * a).min(r.clamp(1.0 - epsilon, 1.0 + epsilon) * a)),
        )
        .into_dyn();
        let op = Op::ClippedSurrogate {
            ratio,
            advantages: Array1::from(advantages.to_vec()),
            epsilon,
        };
        Ok(self.push_op(out, op, &[ratio]))
    }

    /// A primitive with a caller-supplied value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: ArrayD<f64>, backward: CustomBackward) -> Var {
        self.push_op(value, Op::Custom(inputs.to_vec(), backward), inputs)
    }

    /// Reverse pass from a scalar `root`. Gradients of trainable leaves are
    /// added to whatever they already hold.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let nodes = &self.nodes;
        let leaf_grads = &mut self.leaf_grads;
        let val = |v: Var| &nodes[v.0].value;
        let rv = val(root);
        if rv.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(ArrayD::from_elem(rv.raw_dim(), 1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let send = |grads: &mut Vec<Option<ArrayD<f64>>>, p: Var, gp: ArrayD<f64>| {
                if nodes[p.0].requires_grad {
                    accumulate(&mut grads[p.0], gp);
                }
            };
            match &node.op {
                Op::Leaf => accumulate(&mut leaf_grads[id], g),
                Op::MatMul(a, b) => {
                    let g2 = as2(&g);
                    if nodes[a.0].requires_grad {
                        let bv = as2(val(*b));
                        send(&mut grads, *a, g2.dot(&bv.t()).into_dyn());
                    }
                    if nodes[b.0].requires_grad {
                        let av = as2(val(*a));
                        send(&mut grads, *b, av.t().dot(&g2).into_dyn());
                    }
                }
                Op::Transpose(a) => {
                    let gt = as2(&g).t().as_standard_layout().into_owned().into_dyn();
                    send(&mut grads, *a, gt);
                }
                Op::Add(a, b) => {
                    send(&mut grads, *b, g.clone());
                    send(&mut grads, *a, g);
                }
                Op::AddBias(a, bias) => {
                    if nodes[bias.0].requires_grad {
                        let d = g.shape()[g.ndim() - 1];
                        let flat = g
                            .to_shape((g.len() / d, d))
                            .expect("bias grad reshape")
                            .sum_axis(Axis(0))
                            .into_dyn();
                        send(&mut grads, *bias, flat);
                    }
                    send(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * val(*b);
                    let gb = &g * val(*a);
                    send(&mut grads, *a, ga);
                    send(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => send(&mut grads, *a, g * *c),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gx = rowwise_backward(&g, y, |gr, yr, out| {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for k in 0..out.len() {
                            out[k] = yr[k] * (gr[k] - dot);
                        }
                    });
                    send(&mut grads, *a, gx);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let gx = rowwise_backward(&g, y, |gr, yr, out| {
                        let total: f64 = gr.iter().sum();
                        for k in 0..out.len() {
                            out[k] = gr[k] - yr[k].exp() * total;
                        }
                    });
                    send(&mut grads, *a, gx);
                }
                Op::Log(a) => {
                    let gx = &g / val(*a);
                    send(&mut grads, *a, gx);
                }
                Op::Exp(a) => {
                    let gx = &g * &node.value;
                    send(&mut grads, *a, gx);
                }
                Op::Gelu(a) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(val(*a))
                        .for_each(|gv, &x| *gv *= gelu_grad(x));
                    send(&mut grads, *a, gx);
                }
                Op::GatherRows(t, rows) => {
                    let tv = val(*t);
                    let mut gt = Array2::<f64>::zeros((tv.shape()[0], tv.shape()[1]));
                    let g2 = as2(&g);
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = gt.row_mut(r);
                        dst += &g2.row(i);
                    }
                    send(&mut grads, *t, gt.into_dyn());
                }
                Op::PickColumns(a, cols) => {
                    let av = val(*a);
                    let mut ga = Array2::<f64>::zeros((av.shape()[0], av.shape()[1]));
                    for (i, &c) in cols.iter().enumerate() {
                        ga[[i, c]] = g[[i]];
                    }
                    send(&mut grads, *a, ga.into_dyn());
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let g2 = as2(&g);
                    if nodes[gain.0].requires_grad {
                        let gg = (&g2 * xhat).sum_axis(Axis(0)).into_dyn();
                        send(&mut grads, *gain, gg);
                    }
                    if nodes[bias.0].requires_grad {
                        send(&mut grads, *bias, g2.sum_axis(Axis(0)).into_dyn());
                    }
                    if nodes[x.0].requires_grad {
                        let gain_v = val(*gain);
                        let (n, d) = xhat.dim();
                        let mut gx = Array2::<f64>::zeros((n, d));
                        let df = d as f64;
                        for i in 0..n {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..d {
                                let dh = g2[[i, j]] * gain_v[[j]];
                                s1 += dh;
                                s2 += dh * xhat[[i, j]];
                            }
                            for j in 0..d {
                                let dh = g2[[i, j]] * gain_v[[j]];
                                gx[[i, j]] = inv_std[i] * (dh - s1 / df - xhat[[i, j]] * s2 / df);
                            }
                        }
                        send(&mut grads, *x, gx.into_dyn());
                    }
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    let gx = g
                        .to_shape(IxDyn(&shape))
                        .expect("reshape grad")
                        .into_owned();
                    send(&mut grads, *a, gx);
                }
                Op::SliceColumns(a, start, end) => {
                    let av = val(*a);
                    let mut ga = Array2::<f64>::zeros((av.shape()[0], av.shape()[1]));
                    ga.slice_mut(s![.., *start..*end]).assign(&as2(&g));
                    send(&mut grads, *a, ga.into_dyn());
                }
                Op::ConcatColumns(parts) => {
                    let g2 = as2(&g);
                    let mut offset = 0;
                    for &p in parts {
                        let w = val(p).shape()[1];
                        let gp = g2.slice(s![.., offset..offset + w]).to_owned().into_dyn();
                        offset += w;
                        send(&mut grads, p, gp);
                    }
                }
                Op::Sum(a) => {
                    let gs = g.iter().copied().next().unwrap_or(0.0);
                    let gx = ArrayD::from_elem(val(*a).raw_dim(), gs);
                    send(&mut grads, *a, gx);
                }
                Op::Mean(a) => {
                    let av = val(*a);
                    let gs = g.iter().copied().next().unwrap_or(0.0) / av.len() as f64;
                    send(&mut grads, *a, ArrayD::from_elem(av.raw_dim(), gs));
                }
                Op::WeightedSum(a, w) => {
                    let gs = g.iter().copied().next().unwrap_or(0.0);
                    send(&mut grads, *a, w * gs);
                }
                Op::ClippedSurrogate {
                    ratio,
                    advantages,
                    epsilon,
                } => {
                    let rv = val(*ratio);
                    let gx = Array1::from_iter(rv.iter().zip(advantages).zip(g.iter()).map(
                        |((&r, &a), &gv)| {
                            // The unclipped term is the active branch unless the
                            // ratio has left the band in the direction the
                            // advantage would reward.
                            let active = if a >= 0.0 {
                                r <= 1.0 + epsilon
                            } else {
                                r >= 1.0 - epsilon
                            };
                            if active {
                                gv * a
                            } else {
                                0.0
                            }
                        },
                    ));
                    send(&mut grads, *ratio, gx.into_dyn());
                }
                Op::Custom(inputs, rule) => {
                    let vals: Vec<&ArrayD<f64>> = inputs.iter().map(|v| val(*v)).collect();
                    let gs = rule(&g, &vals);
                    for (p, gp) in inputs.iter().zip(gs) {
                        send(&mut grads, *p, gp);
                    }
                }
            }
        }
        Ok(())
    }
}

fn rowwise_backward(
    g: &ArrayD<f64>,
    y: &ArrayD<f64>,
    rule: impl Fn(&[f64], &[f64], &mut [f64]),
) -> ArrayD<f64> {
    let d = y.shape()[y.ndim() - 1];
    let gs = g.as_standard_layout();
    let ys = y.as_standard_layout();
    let gsl = gs.as_slice().expect("standard layout");
    let ysl = ys.as_slice().expect("standard layout");
    let mut out = vec![0.0; y.len()];
    for ((gr, yr), or) in gsl
        .chunks(d)
        .zip(ysl.chunks(d))
        .zip(out.chunks_mut(d))
    {
        rule(gr, yr, or);
    }
    ArrayD::from_shape_vec(y.raw_dim(), out).expect("same size")
}

/// One coordinate whose analytic and numeric derivatives disagree.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Largest relative error among coordinates large enough that `rtol`,
    /// not `atol`, decides the outcome.
    pub max_rel_error: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Central-difference gradient check settings.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub h: f64,
    pub rtol: f64,
    /// Absolute slack for coordinates whose derivative is at the level of
    /// finite-difference round-off. A coordinate passes when
    /// `|analytic - numeric| <= rtol * max(|analytic|, |numeric|) + atol`.
    pub atol: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-5,
            rtol: 1e-4,
            atol: 1e-9,
        }
    }
}

impl GradCheck {
    /// Compares `backward` against `(f(x+h) - f(x-h)) / 2h` on every
    /// coordinate of every parameter.
    pub fn run<F>(&self, f: F, params: &[ArrayD<f64>]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let eval = |ps: &[ArrayD<f64>]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
            let out = f(&mut g, &vars)?;
            Ok(g.scalar(out))
        };

        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let root = f(&mut g, &vars)?;
        g.backward(root)?;
        let analytic: Vec<ArrayD<f64>> = vars
            .iter()
            .zip(params)
            .map(|(v, p)| {
                g.grad(*v)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(p.raw_dim()))
            })
            .collect();

        let mut work: Vec<ArrayD<f64>> = params.to_vec();
        let mut report = GradCheckReport {
            checked: 0,
            max_rel_error: 0.0,
            failures: Vec::new(),
        };
        for pi in 0..work.len() {
            for idx in 0..work[pi].len() {
                let orig = work[pi].as_slice().expect("standard layout")[idx];
                work[pi].as_slice_mut().expect("standard layout")[idx] = orig + self.h;
                let up = eval(&work)?;
                work[pi].as_slice_mut().expect("standard layout")[idx] = orig - self.h;
                let down = eval(&work)?;
                work[pi].as_slice_mut().expect("standard layout")[idx] = orig;

                let numeric = (up - down) / (2.0 * self.h);
                let a = analytic[pi]
                    .as_standard_layout()
                    .as_slice()
                    .expect("standard layout")[idx];
                let diff = (a - numeric).abs();
                let scale = a.abs().max(numeric.abs());
                let rel = if diff == 0.0 { 0.0 } else { diff / scale.max(f64::MIN_POSITIVE) };
                report.checked += 1;
                if scale * self.rtol > self.atol {
                    report.max_rel_error = report.max_rel_error.max(rel);
                }
                if diff > self.rtol * scale + self.atol {
                    report.failures.push(GradMismatch {
                        param: pi,
                        index: idx,
                        analytic: a,
                        numeric,
                        rel_error: rel,
                    });
                }
            }
        }
        Ok(report)
    }
}

pub fn finite_diff_gradcheck<F>(
    f: F,
    params: &[ArrayD<f64>],
    h: f64,
    rtol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    GradCheck {
        h,
        rtol,
        ..GradCheck::default()
    }
    .run(f, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        let n = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn check(f: impl Fn(&mut Graph, &[Var]) -> Result<Var>, params: &[ArrayD<f64>]) {
        let report = finite_diff_gradcheck(f, params, 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "{:?}", &report.failures[..report.failures.len().min(5)]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(arr1(&[0.0, 0.0, 0.0, 0.0]).into_dyn());
        let y = g.softmax(x).unwrap();
        for v in g.value(y) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.constant(rand_arr(&mut rng, &[5, 7]) * 30.0);
        let y = g.softmax(x).unwrap();
        for row in as2(g.value(y)).rows() {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_contract() {
        let mut g = Graph::new();
        let a = g.constant(ArrayD::zeros(IxDyn(&[2, 3])));
        let b = g.constant(ArrayD::zeros(IxDyn(&[3, 1])));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        let err = g.matmul(a, a).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"), "{err}");
    }

    #[test]
    fn gather_rows_out_of_range_errors() {
        let mut g = Graph::new();
        let t = g.constant(ArrayD::zeros(IxDyn(&[4, 2])));
        assert!(matches!(
            g.gather_rows(t, &[0, 4]),
            Err(AutodiffError::Index { index: 4, len: 4, .. })
        ));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(arr1(&[1.0, -2.0, 3.0]).into_dyn());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &arr1(&[1.0, 1.0, 1.0]).into_dyn());
    }

    #[test]
    fn mean_of_square_gradient() {
        // d/dx mean(x*x) = 2x/n = x for n = 2
        let mut g = Graph::new();
        let x = g.param(arr1(&[1.0, 2.0]).into_dyn());
        let sq = g.mul(x, x).unwrap();
        let m = g.mean(sq).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap(), &arr1(&[1.0, 2.0]).into_dyn());
        check(
            |g, p| {
                let sq = g.mul(p[0], p[0])?;
                g.mean(sq)
            },
            &[arr1(&[1.0, 2.0]).into_dyn()],
        );
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.param(arr1(&[0.5, -1.5]).into_dyn());
        let e = g.exp(x);
        let s = g.sum(e);
        g.backward(s).unwrap();
        let once = g.grad(x).unwrap().clone();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &(&once * 2.0));
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(arr1(&[1.0, 2.0]).into_dyn());
        assert!(matches!(g.backward(x), Err(AutodiffError::NonScalarRoot(_))));
    }

    #[test]
    fn bias_only_over_last_axis() {
        let mut g = Graph::new();
        let a = g.param(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = g.param(arr1(&[10.0, 20.0]).into_dyn());
        let c = g.add_bias(a, b).unwrap();
        assert_eq!(g.value(c), &arr2(&[[11.0, 22.0], [13.0, 24.0]]).into_dyn());
        let bad = g.param(arr1(&[1.0, 2.0, 3.0]).into_dyn());
        assert!(g.add_bias(a, bad).is_err());
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_arr(&mut rng, &[3, 4]);
        let b = rand_arr(&mut rng, &[4, 2]);
        let c = rand_arr(&mut rng, &[3, 4]);
        let v = rand_arr(&mut rng, &[4]);
        let w = rand_arr(&mut rng, &[3, 2]);
        let pos = rand_arr(&mut rng, &[3, 4]).mapv(|x| x.abs() + 0.5);

        check(|g, p| { let m = g.matmul(p[0], p[1])?; let m2 = g.mul(m, m)?; Ok(g.sum(m2)) }, &[a.clone(), b.clone()]);
        check(|g, p| { let t = g.transpose(p[0])?; let m = g.matmul(t, p[1])?; let m2 = g.mul(m, m)?; g.mean(m2) }, &[a.clone(), c.clone()]);
        check(|g, p| { let s = g.add(p[0], p[1])?; let e = g.exp(s); Ok(g.sum(e)) }, &[a.clone(), c.clone()]);
        check(|g, p| { let s = g.add_bias(p[0], p[1])?; let q = g.mul(s, s)?; Ok(g.sum(q)) }, &[a.clone(), v.clone()]);
        check(|g, p| { let s = g.softmax(p[0])?; g.weighted_sum(s, w.clone()) }, &[rand_arr(&mut rng, &[3, 2])]);
        check(|g, p| { let s = g.softmax(p[0])?; let q = g.mul(s, p[1])?; Ok(g.sum(q)) }, &[a.clone(), c.clone()]);
        check(|g, p| { let s = g.log_softmax(p[0])?; let q = g.mul(s, p[1])?; Ok(g.sum(q)) }, &[a.clone(), c.clone()]);
        check(|g, p| { let l = g.log(p[0]); let q = g.mul(l, p[1])?; Ok(g.sum(q)) }, &[pos.clone(), c.clone()]);
        check(|g, p| { let e = g.gelu(p[0]); let q = g.mul(e, p[1])?; Ok(g.sum(q)) }, &[a.clone() * 3.0, c.clone()]);
        check(|g, p| { let r = g.gather_rows(p[0], &[2, 0, 2])?; let q = g.mul(r, r)?; Ok(g.sum(q)) }, &[a.clone()]);
        check(|g, p| { let r = g.pick_columns(p[0], &[3, 0, 1])?; let e = g.exp(r); Ok(g.sum(e)) }, &[a.clone()]);
        check(|g, p| { let y = g.layer_norm(p[0], p[1], p[2], 1e-5)?; let q = g.mul(y, p[3])?; Ok(g.sum(q)) }, &[a.clone(), v.clone() + 1.0, v.clone(), c.clone()]);
        check(|g, p| { let r = g.reshape(p[0], &[2, 6])?; let r2 = g.reshape(p[1], &[6, 2])?; let m = g.matmul(r, r2)?; let q = g.mul(m, m)?; Ok(g.sum(q)) }, &[a.clone(), c.clone()]);
        check(|g, p| { let l = g.slice_columns(p[0], 1, 3)?; let r = g.slice_columns(p[1], 0, 1)?; let cat = g.concat_columns(&[r, l, r])?; let q = g.mul(cat, cat)?; Ok(g.sum(q)) }, &[a.clone(), c.clone()]);
        check(|g, p| { let s = g.scale(p[0], -2.5); let e = g.exp(s); g.mean(e) }, &[a.clone()]);
        let adv = [1.0, -0.5, 2.0, -1.0];
        check(|g, p| { let r = g.exp(p[0]); let s = g.clipped_surrogate(r, &adv, 0.2)?; Ok(g.sum(s)) }, &[arr1(&[0.05, -0.1, 0.5, -0.5]).into_dyn()]);
    }

    #[test]
    fn clipped_surrogate_caps_and_floors() {
        let mut g = Graph::new();
        let r = g.param(arr1(&[1.5, 0.5, 1.1, 0.5]).into_dyn());
        let s = g.clipped_surrogate(r, &[1.0, -1.0, 1.0, 1.0], 0.2).unwrap();
        assert_eq!(g.value(s), &arr1(&[1.2, -0.8, 1.1, 0.5]).into_dyn());
        let t = g.sum(s);
        g.backward(t).unwrap();
        assert_eq!(g.grad(r).unwrap(), &arr1(&[0.0, 0.0, 1.0, 1.0]).into_dyn());
    }

    #[test]
    fn quadratic_and_zero_functions_pass() {
        let x = array![0.3, -1.2, 2.0].into_dyn();
        let r = finite_diff_gradcheck(|g, p| { let q = g.mul(p[0], p[0])?; Ok(g.sum(q)) }, &[x.clone()], 1e-4, 1e-4).unwrap();
        assert!(r.passed());
        assert_eq!(r.checked, 3);
        let zero = finite_diff_gradcheck(|g, p| { let s = g.sum(p[0]); Ok(g.scale(s, 0.0)) }, &[x], 1e-4, 1e-4).unwrap();
        assert!(zero.passed());
        assert_eq!(zero.max_rel_error, 0.0);
    }

    #[test]
    fn wrong_backward_rule_is_reported() {
        let x = array![0.3, -1.2, 2.0].into_dyn();
        let report = finite_diff_gradcheck(
            |g, p| {
                let xv = g.value(p[0]).clone();
                // value x^2 but backward claims 3x
                let sq = g.custom(&[p[0]], xv.mapv(|v| v * v), Arc::new(|gout, ins| vec![ins[0].mapv(|v| 3.0 * v) * gout]));
                Ok(g.sum(sq))
            },
            &[x],
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures.len(), 3);
        assert!(report.max_rel_error > 0.3);
    }

    #[test]
    fn evaluation_is_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut g = Graph::new();
            let a = g.param(rand_arr(&mut rng, &[6, 5]));
            let b = g.param(rand_arr(&mut rng, &[5, 6]));
            let m = g.matmul(a, b).unwrap();
            let s = g.softmax(m).unwrap();
            let l = g.log(s);
            let t = g.sum(l);
            g.backward(t).unwrap();
            (g.value(s).clone(), g.grad(a).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
