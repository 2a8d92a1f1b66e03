//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every operation appends a node holding its output value. [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients into the parameters
//! that were read through [`Tape::param`].

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{check_shape, NnError, Result};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Node handle on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Directed edge list of a per-edge graph convolution. Edge `(i, j)` carries
/// the features of node `j` into node `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTopology {
    pub n_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub in_width: usize,
    pub out_width: usize,
}

enum Op {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    GraphConv { x: Var, w: Var, b: Var, topo: Arc<ConvTopology> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { a: Var, scale: f64 },
    LeakyRelu { a: Var, slope: f64 },
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    RotMul(Var, Var),
    RotApply(Var, Var),
}

struct Node {
    op: Op,
    value: Option<Tensor>,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.store.get(*id),
            (_, Some(t)) => t,
            _ => unreachable!("non-parameter node without value"),
        }
    }

    fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient is reported for it).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value)
    }

    /// Reads a parameter; repeated reads share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// `x·Wᵀ + b` with `x: [B, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(NnError::ShapeMismatch {
                context: "linear",
                expected: vec![xs.first().copied().unwrap_or(0), ws.get(1).copied().unwrap_or(0)],
                actual: xs,
            });
        }
        let (rows, inw, outw) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            check_shape("linear bias", &[outw], self.value(b).shape())?;
        }
        let mut out = Tensor::zeros(&[rows, outw]);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in 0..rows {
                out.data_mut()[r * outw..(r + 1) * outw].copy_from_slice(bias);
            }
        }
        gemm(
            rows,
            inw,
            outw,
            1.0,
            self.value(x).data(),
            inw as isize,
            1,
            self.value(w).data(),
            1,
            inw as isize,
            1.0,
            out.data_mut(),
            outw as isize,
            1,
        );
        Ok(self.push(Op::Linear { x, w, b }, out))
    }

    /// Per-edge graph convolution: `out_i = Σ_{(i,j)} W_e·x_j + b_i`.
    ///
    /// `x` is `[B, N·in]` with node-major feature blocks, `w` is `[E, out, in]`
    /// and `b` is `[N, out]`.
    pub fn graph_conv(&mut self, x: Var, w: Var, b: Var, topo: Arc<ConvTopology>) -> Result<Var> {
        let xs = self.shape(x);
        let (n, inw, outw) = (topo.n_nodes, topo.in_width, topo.out_width);
        if xs.len() != 2 || xs[1] != n * inw {
            return Err(NnError::ShapeMismatch {
                context: "graph_conv input",
                expected: vec![xs.first().copied().unwrap_or(0), n * inw],
                actual: xs,
            });
        }
        check_shape("graph_conv weight", &[topo.edges.len(), outw, inw], self.value(w).shape())?;
        check_shape("graph_conv bias", &[n, outw], self.value(b).shape())?;
        let rows = xs[0];
        let mut out = Tensor::zeros(&[rows, n * outw]);
        {
            let bias = self.value(b).data();
            let od = out.data_mut();
            for r in 0..rows {
                od[r * n * outw..(r + 1) * n * outw].copy_from_slice(bias);
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        for (e, &(i, j)) in topo.edges.iter().enumerate() {
            let we = &wd[e * outw * inw..(e + 1) * outw * inw];
            gemm(
                rows,
                inw,
                outw,
                1.0,
                &xd[j * inw..],
                (n * inw) as isize,
                1,
                we,
                1,
                inw as isize,
                1.0,
                &mut out.data_mut()[i * outw..],
                (n * outw) as isize,
                1,
            );
        }
        Ok(self.push(Op::GraphConv { x, w, b, topo }, out))
    }

    fn binary(&mut self, context: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_shape(context, ta.shape(), tb.shape())?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), t))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), t))
    }

    /// `scale·a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(a).map(|v| scale * v + shift);
        self.push(Op::Affine { a, scale }, t)
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let t = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(Op::LeakyRelu { a, slope }, t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), t)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), t)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), t)
    }

    /// Sum of all entries as a `[1, 1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean absolute difference.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(NnError::ShapeMismatch {
                    context: "concat_cols",
                    expected: vec![rows, s.get(1).copied().unwrap_or(0)],
                    actual: s,
                });
            }
            cols += s[1];
        }
        let mut out = Tensor::zeros(&[rows, cols]);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for r in 0..rows {
                out.data_mut()[r * cols + offset..r * cols + offset + c].copy_from_slice(t.row(r));
            }
            offset += c;
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || start + len > t.cols() {
            return Err(NnError::ShapeMismatch {
                context: "slice_cols",
                expected: vec![start + len],
                actual: t.shape().to_vec(),
            });
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::from_vec(&[rows, len], data)?;
        Ok(self.push(Op::SliceCols { a, start }, out))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.cols() != cols {
                return Err(NnError::ShapeMismatch {
                    context: "concat_rows",
                    expected: vec![t.rows(), cols],
                    actual: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::from_vec(&[rows, cols], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || start + len > t.rows() {
            return Err(NnError::ShapeMismatch {
                context: "slice_rows",
                expected: vec![start + len],
                actual: t.shape().to_vec(),
            });
        }
        let c = t.cols();
        let out = Tensor::from_vec(&[len, c], t.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(Op::SliceRows { a, start }, out))
    }

    /// Row-wise product of 3×3 matrices stored row-major: `[B, 9]·[B, 9]`.
    pub fn rot_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let rows = self.check_rows("rot_mul", a, 9, b, 9)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(&[rows, 9]);
        for r in 0..rows {
            let (ma, mb) = (ta.row(r), tb.row(r));
            let o = &mut out.data_mut()[r * 9..(r + 1) * 9];
            for i in 0..3 {
                for j in 0..3 {
                    o[i * 3 + j] = (0..3).map(|k| ma[i * 3 + k] * mb[k * 3 + j]).sum();
                }
            }
        }
        Ok(self.push(Op::RotMul(a, b), out))
    }

    /// Row-wise matrix–vector product: `[B, 9]·[B, 3]`.
    pub fn rot_apply(&mut self, a: Var, v: Var) -> Result<Var> {
        let rows = self.check_rows("rot_apply", a, 9, v, 3)?;
        let (ta, tv) = (self.value(a), self.value(v));
        let mut out = Tensor::zeros(&[rows, 3]);
        for r in 0..rows {
            let (m, x) = (ta.row(r), tv.row(r));
            let o = &mut out.data_mut()[r * 3..(r + 1) * 3];
            for i in 0..3 {
                o[i] = (0..3).map(|k| m[i * 3 + k] * x[k]).sum();
            }
        }
        Ok(self.push(Op::RotApply(a, v), out))
    }

    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Input)
    }

    fn check_rows(&self, context: &'static str, a: Var, ca: usize, b: Var, cb: usize) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let rows = sa.first().copied().unwrap_or(0);
        check_shape(context, &[rows, ca], &sa)?;
        check_shape(context, &[rows, cb], &sb)?;
        Ok(rows)
    }

    /// Reverse pass from a scalar `loss`, returning parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        check_shape("backward loss", &[1, 1], self.value(loss).shape())?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Grads::zeros_like(self.store);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(id) => out.get_mut(*id).add_assign(&g),
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (rows, inw, outw) = (xv.rows(), xv.cols(), wv.rows());
                    if self.needs_grad(*x) {
                        let mut dx = Tensor::zeros(&[rows, inw]);
                        gemm(rows, outw, inw, 1.0, g.data(), outw as isize, 1, wv.data(), inw as isize, 1, 0.0, dx.data_mut(), inw as isize, 1);
                        accumulate(&mut grads, *x, dx);
                    }
                    let mut dw = Tensor::zeros(&[outw, inw]);
                    gemm(outw, rows, inw, 1.0, g.data(), 1, outw as isize, xv.data(), inw as isize, 1, 0.0, dw.data_mut(), inw as isize, 1);
                    accumulate(&mut grads, *w, dw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, col_sums(&g));
                    }
                }
                Op::GraphConv { x, w, b, topo } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, inw, outw) = (topo.n_nodes, topo.in_width, topo.out_width);
                    let rows = xv.rows();
                    let want_dx = self.needs_grad(*x);
                    let mut dx = if want_dx { Tensor::zeros(&[rows, n * inw]) } else { Tensor::zeros(&[0, 0]) };
                    let mut dw = Tensor::zeros(wv.shape());
                    for (e, &(i, j)) in topo.edges.iter().enumerate() {
                        let span = e * outw * inw..(e + 1) * outw * inw;
                        // dW_e = dOut_iᵀ · x_j
                        gemm(outw, rows, inw, 1.0, &g.data()[i * outw..], 1, (n * outw) as isize, &xv.data()[j * inw..], (n * inw) as isize, 1, 0.0, &mut dw.data_mut()[span.clone()], inw as isize, 1);
                        // dx_j += dOut_i · W_e
                        if !want_dx {
                            continue;
                        }
                        gemm(rows, outw, inw, 1.0, &g.data()[i * outw..], (n * outw) as isize, 1, &wv.data()[span], inw as isize, 1, 1.0, &mut dx.data_mut()[j * inw..], (n * inw) as isize, 1);
                    }
                    let sums = col_sums(&g);
                    let db = Tensor::from_vec(&[n, outw], sums.into_data())?;
                    if want_dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = zip_map(&g, self.value(*b), |gv, bv| gv * bv);
                    let db = zip_map(&g, self.value(*a), |gv, av| gv * av);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Affine { a, scale } => {
                    let s = *scale;
                    accumulate(&mut grads, *a, g.map(|v| v * s));
                }
                Op::LeakyRelu { a, slope } => {
                    let s = *slope;
                    let d = zip_map(&g, self.value(*a), |gv, x| if x > 0.0 { gv } else { s * gv });
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let y = self.value(Var(idx));
                    let d = zip_map(&g, y, |gv, yv| gv * yv * (1.0 - yv));
                    accumulate(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let y = self.value(Var(idx));
                    let d = zip_map(&g, y, |gv, yv| gv * (1.0 - yv * yv));
                    accumulate(&mut grads, *a, d);
                }
                Op::Abs(a) => {
                    let d = zip_map(&g, self.value(*a), |gv, x| {
                        if x > 0.0 {
                            gv
                        } else if x < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let s = g.item();
                    accumulate(&mut grads, *a, Tensor::full(self.value(*a).shape(), s));
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                        }
                        accumulate(&mut grads, p, Tensor::from_vec(&[rows, c], d)?);
                        offset += c;
                    }
                }
                Op::SliceCols { a, start } => {
                    let src = self.value(*a);
                    let (rows, cols, len) = (src.rows(), src.cols(), g.cols());
                    let mut d = Tensor::zeros(&[rows, cols]);
                    for r in 0..rows {
                        d.data_mut()[r * cols + start..r * cols + start + len].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let r = self.value(p).rows();
                        let d = g.data()[offset * cols..(offset + r) * cols].to_vec();
                        accumulate(&mut grads, p, Tensor::from_vec(&[r, cols], d)?);
                        offset += r;
                    }
                }
                Op::SliceRows { a, start } => {
                    let src = self.value(*a);
                    let cols = src.cols();
                    let mut d = Tensor::zeros(src.shape());
                    d.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, d);
                }
                Op::RotMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let rows = ta.rows();
                    let mut da = Tensor::zeros(&[rows, 9]);
                    let mut db = Tensor::zeros(&[rows, 9]);
                    for r in 0..rows {
                        let (ma, mb, gr) = (ta.row(r), tb.row(r), g.row(r));
                        for i in 0..3 {
                            for j in 0..3 {
                                let gij = gr[i * 3 + j];
                                for k in 0..3 {
                                    da.data_mut()[r * 9 + i * 3 + k] += gij * mb[k * 3 + j];
                                    db.data_mut()[r * 9 + k * 3 + j] += gij * ma[i * 3 + k];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::RotApply(a, v) => {
                    let (ta, tv) = (self.value(*a), self.value(*v));
                    let rows = ta.rows();
                    let mut da = Tensor::zeros(&[rows, 9]);
                    let mut dv = Tensor::zeros(&[rows, 3]);
                    for r in 0..rows {
                        let (m, x, gr) = (ta.row(r), tv.row(r), g.row(r));
                        for i in 0..3 {
                            for k in 0..3 {
                                da.data_mut()[r * 9 + i * 3 + k] += gr[i] * x[k];
                                dv.data_mut()[r * 3 + k] += gr[i] * m[i * 3 + k];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *v, dv);
                }
            }
        }

        for (id, g) in out.iter() {
            if !g.is_finite() {
                return Err(NnError::NonFiniteGradient {
                    param: self.store.name(id).to_string(),
                });
            }
        }
        Ok(out)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("shapes already checked")
}

fn col_sums(g: &Tensor) -> Tensor {
    let cols = g.cols();
    let mut s = vec![0.0; cols];
    for r in 0..g.rows() {
        for (acc, v) in s.iter_mut().zip(g.row(r)) {
            *acc += v;
        }
    }
    Tensor::from_vec(&[cols], s).expect("length matches")
}
