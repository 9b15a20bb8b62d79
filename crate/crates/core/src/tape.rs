//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! bound by name from a [`ParamStore`]; after [`Graph::backward`] the
//! gradients of every bound trainable parameter can be collected by name.
//! Frozen parameters and constants are leaves that never receive gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Tanh,
    Relu,
}

/// Geometry of a batched multi-head attention call.
///
/// Queries are laid out as `batch * q_len` rows, keys and values as
/// `batch * k_len` rows; sample `b` only attends within its own block.
#[derive(Debug, Clone)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// `batch * k_len` flags; false keys are excluded from the softmax.
    pub key_mask: Vec<bool>,
}

#[derive(Debug)]
struct AttentionCache {
    spec: AttentionSpec,
    scale: f64,
    // weights[((b * heads + h) * q_len + i) * k_len + j]; masked entries are 0
    weights: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    Act(Var, Activation),
    Sigmoid(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    MeanAll(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SelectRows(Vec<bool>, Var, Var),
    LayerNorm(Var, Vec<f64>),
    NormalizeRows(Var, Vec<f64>),
    LogSoftmaxRows(Var),
    Diag(Var),
    Attention { q: Var, k: Var, v: Var, cache: Box<AttentionCache> },
    Conv1d { channels: Vec<Var>, kernel: Var, bias: Var },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: BTreeMap<String, Var>,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    bound: BTreeMap<String, Var>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient w.r.t. a named parameter; zeros if the parameter was bound
    /// but nothing flowed into it, `None` if it was never bound.
    pub fn param(&self, name: &str) -> Option<Matrix> {
        let v = *self.bound.get(name)?;
        Some(match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        })
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_grad(x),
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A free leaf that receives gradient; used for probes and tests.
    pub fn variable(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Binds a named parameter, reusing the leaf if already bound.
    /// Panics if the store has no such parameter.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let p = store.get(name).unwrap_or_else(|| panic!("parameter `{name}` is not in the store"));
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn is_bound(&self, name: &str) -> bool {
        self.bound.contains_key(name)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `a + row` with `row` (1 x n) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut value = self.value(a).clone();
        let rv = r.row(0).to_vec();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(&rv) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// `a * row` elementwise with `row` (1 x n) broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "mul_row expects a single row");
        assert_eq!(r.cols(), self.value(a).cols(), "mul_row width mismatch");
        let mut value = self.value(a).clone();
        let rv = r.row(0).to_vec();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(&rv) {
                *x *= b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    /// `c * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, c: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| c * x + shift);
        let rg = self.rg(&[a]);
        self.push(value, Op::Affine(a, c), rg)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let value = self.value(a).map(|x| act.apply(x));
        let rg = self.rg(&[a]);
        self.push(value, Op::Act(a, act), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let rg = self.rg(&[a]);
        self.push(value, Op::Abs(a), rg)
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(&[a]);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::scalar(m.sum() / m.len() as f64);
        let rg = self.rg(&[a]);
        self.push(value, Op::MeanAll(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let value = Matrix::concat_cols(&mats);
        let rg = self.rg(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let value = Matrix::concat_rows(&mats);
        let rg = self.rg(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_cols(start, len);
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).gather_rows(idx);
        let rg = self.rg(&[a]);
        self.push(value, Op::GatherRows(a, idx.to_vec()), rg)
    }

    /// Row `i` comes from `a` where `take_a[i]`, otherwise from `b`.
    pub fn select_rows(&mut self, take_a: &[bool], a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.shape(), mb.shape(), "select_rows shape mismatch");
        assert_eq!(take_a.len(), ma.rows());
        let mut value = mb.clone();
        for (i, &t) in take_a.iter().enumerate() {
            if t {
                value.row_mut(i).copy_from_slice(ma.row(i));
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(value, Op::SelectRows(take_a.to_vec(), a, b), rg)
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let m = self.value(a);
        let n = m.cols() as f64;
        let mut value = m.clone();
        let mut inv_std = Vec::with_capacity(m.rows());
        for r in 0..m.rows() {
            let row = m.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            for (o, x) in value.row_mut(r).iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::LayerNorm(a, inv_std), rg)
    }

    /// Scales every row to unit Euclidean norm. Callers must reject
    /// zero-norm rows beforehand; they produce non-finite output here.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut value = m.clone();
        let mut norms = Vec::with_capacity(m.rows());
        for r in 0..m.rows() {
            let norm = m.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in value.row_mut(r) {
                *x /= norm;
            }
            norms.push(norm);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::NormalizeRows(a, norms), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut value = m.clone();
        for r in 0..m.rows() {
            let row = m.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (o, x) in value.row_mut(r).iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    /// Diagonal of a square matrix as an n x 1 column.
    pub fn diag(&mut self, a: Var) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows(), m.cols(), "diag of non-square matrix");
        let d: Vec<f64> = (0..m.rows()).map(|i| m.get(i, i)).collect();
        let rg = self.rg(&[a]);
        self.push(Matrix::column(&d), Op::Diag(a), rg)
    }

    /// Scaled dot-product attention, multi-head, batched by blocks.
    ///
    /// Heads split the model width evenly. Each query row must have at least
    /// one valid key in its block; callers check that and report an error.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let width = qm.cols();
        assert_eq!(km.cols(), width, "query/key width mismatch");
        assert_eq!(vm.cols(), width, "value width mismatch");
        assert_eq!(qm.rows(), spec.batch * spec.q_len);
        assert_eq!(km.rows(), spec.batch * spec.k_len);
        assert_eq!(vm.rows(), spec.batch * spec.k_len);
        assert_eq!(spec.key_mask.len(), spec.batch * spec.k_len);
        assert!(spec.heads > 0 && width % spec.heads == 0, "heads must divide width");
        let hd = width / spec.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (tq, tk, heads) = (spec.q_len, spec.k_len, spec.heads);
        let mut weights = vec![0.0; spec.batch * heads * tq * tk];
        let mut out = Matrix::zeros(qm.rows(), width);
        let mut scores = vec![0.0; tk];
        for b in 0..spec.batch {
            let mask = &spec.key_mask[b * tk..(b + 1) * tk];
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                for i in 0..tq {
                    let qrow = &qm.row(b * tq + i)[cols.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..tk {
                        if !mask[j] {
                            continue;
                        }
                        let krow = &km.row(b * tk + j)[cols.clone()];
                        let s = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut denom = 0.0;
                    for j in 0..tk {
                        if mask[j] {
                            scores[j] = (scores[j] - max).exp();
                            denom += scores[j];
                        }
                    }
                    let wbase = ((b * heads + h) * tq + i) * tk;
                    let orow = &mut out.row_mut(b * tq + i)[cols.clone()];
                    for j in 0..tk {
                        if !mask[j] {
                            continue;
                        }
                        let w = scores[j] / denom;
                        weights[wbase + j] = w;
                        let vrow = &vm.row(b * tk + j)[cols.clone()];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        let cache = Box::new(AttentionCache { spec, scale, weights });
        self.push(out, Op::Attention { q, k, v, cache }, rg)
    }

    /// Attention weights recorded by an [`Graph::attention`] node, laid out
    /// as `[batch][head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { cache, .. } => Some(&cache.weights),
            _ => None,
        }
    }

    /// 1-D convolution along the column axis with zero padding.
    ///
    /// `channels` are equally shaped `n x d` inputs, `kernel` is
    /// `channels x width` (odd width), `bias` is 1 x 1. Output is `n x d`.
    pub fn conv1d(&mut self, channels: &[Var], kernel: Var, bias: Var) -> Var {
        let km = self.value(kernel);
        assert_eq!(km.rows(), channels.len(), "kernel rows must equal channel count");
        let width = km.cols();
        assert!(width % 2 == 1, "kernel width must be odd");
        let pad = width / 2;
        let (n, d) = self.value(channels[0]).shape();
        let b = self.value(bias).item();
        let mut out = Matrix::filled(n, d, 0.0);
        for r in 0..n {
            for o in 0..d {
                let mut acc = 0.0;
                for (c, &ch) in channels.iter().enumerate() {
                    let x = self.value(ch);
                    assert_eq!(x.shape(), (n, d), "conv channels must share shape");
                    for t in 0..width {
                        let pos = o as isize + t as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < d {
                            acc += km.get(c, t) * x.get(r, pos as usize);
                        }
                    }
                }
                out.set(r, o, acc + b);
            }
        }
        let mut deps = channels.to_vec();
        deps.push(kernel);
        deps.push(bias);
        let rg = self.rg(&deps);
        self.push(out, Op::Conv1d { channels: channels.to_vec(), kernel, bias }, rg)
    }

    /// Runs reverse accumulation from a 1x1 output.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads, bound: self.bound.clone(), shapes: self.nodes.iter().map(|n| n.value.shape()).collect() }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let acc = |v: Var, d: Matrix, grads: &mut [Option<Matrix>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, g.matmul_t(self.value(*b)), grads);
                }
                if needs(*b) {
                    acc(*b, self.value(*a).t_matmul(g), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                if needs(*b) {
                    acc(*b, g.scale(-1.0), grads);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y), grads);
                }
                if needs(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y), grads);
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone(), grads);
                if needs(*row) {
                    acc(*row, column_sums(g), grads);
                }
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row);
                if needs(*a) {
                    let mut d = g.clone();
                    for i in 0..d.rows() {
                        for (x, s) in d.row_mut(i).iter_mut().zip(r.row(0)) {
                            *x *= s;
                        }
                    }
                    acc(*a, d, grads);
                }
                if needs(*row) {
                    let av = self.value(*a);
                    acc(*row, column_sums(&g.zip_map(av, |x, y| x * y)), grads);
                }
            }
            Op::Affine(a, c) => acc(*a, g.scale(*c), grads),
            Op::Act(a, act) => {
                let d = g.zip_map(self.value(*a), |gv, x| gv * act.derivative(x));
                acc(*a, d, grads);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gv, s| gv * s * (1.0 - s));
                acc(*a, d, grads);
            }
            Op::Abs(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
                acc(*a, d, grads);
            }
            Op::Clamp(a, lo, hi) => {
                let d = g.zip_map(self.value(*a), |gv, x| if x > *lo && x < *hi { gv } else { 0.0 });
                acc(*a, d, grads);
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::filled(r, c, g.item()), grads);
            }
            Op::MeanAll(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::filled(r, c, g.item() / (r * c) as f64), grads);
            }
            Op::Transpose(a) => acc(*a, g.transpose(), grads),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if needs(*p) {
                        acc(*p, g.slice_cols(off, w), grads);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let h = self.value(*p).rows();
                    if needs(*p) {
                        let idx: Vec<usize> = (off..off + h).collect();
                        acc(*p, g.gather_rows(&idx), grads);
                    }
                    off += h;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut d = Matrix::zeros(r, c);
                let w = g.cols();
                for i in 0..r {
                    d.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                }
                acc(*a, d, grads);
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.value(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (x, y) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *x += y;
                    }
                }
                acc(*a, d, grads);
            }
            Op::SelectRows(take_a, a, b) => {
                let (r, c) = g.shape();
                let mut da = Matrix::zeros(r, c);
                let mut db = Matrix::zeros(r, c);
                for (i, &t) in take_a.iter().enumerate() {
                    let dst = if t { &mut da } else { &mut db };
                    dst.row_mut(i).copy_from_slice(g.row(i));
                }
                acc(*a, da, grads);
                acc(*b, db, grads);
            }
            Op::LayerNorm(a, inv_std) => {
                let y = &node.value;
                let n = y.cols() as f64;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for (r, &inv) in inv_std.iter().enumerate() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, gv), yv) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv * (gv - mean_g - yv * mean_gy);
                    }
                }
                acc(*a, d, grads);
            }
            Op::NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for (r, &norm) in norms.iter().enumerate() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                    for ((o, gv), yv) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = (gv - yv * dot) / norm;
                    }
                }
                acc(*a, d, grads);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let gsum: f64 = gr.iter().sum();
                    for ((o, gv), yv) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = gv - yv.exp() * gsum;
                    }
                }
                acc(*a, d, grads);
            }
            Op::Diag(a) => {
                let n = g.rows();
                let mut d = Matrix::zeros(n, n);
                for i in 0..n {
                    d.set(i, i, g.get(i, 0));
                }
                acc(*a, d, grads);
            }
            Op::Attention { q, k, v, cache } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, cache, g);
                acc(*q, dq, grads);
                acc(*k, dk, grads);
                acc(*v, dv, grads);
            }
            Op::Conv1d { channels, kernel, bias } => {
                let km = self.value(*kernel);
                let width = km.cols();
                let pad = width / 2;
                let (n, d) = g.shape();
                let mut dk = Matrix::zeros(km.rows(), width);
                for (c, &ch) in channels.iter().enumerate() {
                    let x = self.value(ch);
                    let mut dx = Matrix::zeros(n, d);
                    for r in 0..n {
                        for o in 0..d {
                            let gv = g.get(r, o);
                            for t in 0..width {
                                let pos = o as isize + t as isize - pad as isize;
                                if pos >= 0 && (pos as usize) < d {
                                    let p = pos as usize;
                                    dk.set(c, t, dk.get(c, t) + gv * x.get(r, p));
                                    dx.set(r, p, dx.get(r, p) + gv * km.get(c, t));
                                }
                            }
                        }
                    }
                    acc(ch, dx, grads);
                }
                acc(*kernel, dk, grads);
                acc(*bias, Matrix::scalar(g.sum()), grads);
            }
        }
    }

    fn attention_backward(&self, q: Var, k: Var, v: Var, cache: &AttentionCache, g: &Matrix) -> (Matrix, Matrix, Matrix) {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let spec = &cache.spec;
        let width = qm.cols();
        let hd = width / spec.heads;
        let (tq, tk, heads) = (spec.q_len, spec.k_len, spec.heads);
        let mut dq = Matrix::zeros(qm.rows(), width);
        let mut dk = Matrix::zeros(km.rows(), width);
        let mut dv = Matrix::zeros(vm.rows(), width);
        let mut dw = vec![0.0; tk];
        for b in 0..spec.batch {
            let mask = &spec.key_mask[b * tk..(b + 1) * tk];
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                for i in 0..tq {
                    let wbase = ((b * heads + h) * tq + i) * tk;
                    let grow = &g.row(b * tq + i)[cols.clone()];
                    let mut wdot = 0.0;
                    for j in 0..tk {
                        if !mask[j] {
                            continue;
                        }
                        let w = cache.weights[wbase + j];
                        let vrow = &vm.row(b * tk + j)[cols.clone()];
                        dw[j] = grow.iter().zip(vrow).map(|(x, y)| x * y).sum();
                        wdot += w * dw[j];
                        for (o, gv) in dv.row_mut(b * tk + j)[cols.clone()].iter_mut().zip(grow) {
                            *o += w * gv;
                        }
                    }
                    for j in 0..tk {
                        if !mask[j] {
                            continue;
                        }
                        let ds = cache.weights[wbase + j] * (dw[j] - wdot) * cache.scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = km.row(b * tk + j)[cols.clone()].to_vec();
                        let qrow = qm.row(b * tq + i)[cols.clone()].to_vec();
                        for (o, x) in dq.row_mut(b * tq + i)[cols.clone()].iter_mut().zip(&krow) {
                            *o += ds * x;
                        }
                        for (o, x) in dk.row_mut(b * tk + j)[cols.clone()].iter_mut().zip(&qrow) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, x) in out.row_mut(0).iter_mut().zip(m.row(r)) {
            *o += x;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference;

    // Checks d(sum(w * f(x)))/dx against central differences for a free input.
    fn check_unary(x: Matrix, build: impl Fn(&mut Graph, Var) -> Var) {
        let (r, c) = x.shape();
        let eval = |x: &Matrix| -> (f64, Option<Matrix>) {
            let mut g = Graph::new();
            let xv = g.variable(x.clone());
            let y = build(&mut g, xv);
            let (yr, yc) = g.value(y).shape();
            let wv = g.constant(Matrix::from_vec(yr, yc, (0..yr * yc).map(|i| 0.3 + 0.17 * i as f64).collect()));
            let p = g.mul(y, wv);
            let loss = g.sum_all(p);
            let grads = g.backward(loss);
            (g.value(loss).item(), grads.wrt(xv).cloned())
        };
        let (_, analytic) = eval(&x);
        let analytic = analytic.unwrap_or_else(|| Matrix::zeros(r, c));
        let numeric = finite_difference(&x, 1e-5, |m| eval(m).0);
        let err = analytic.max_abs_diff(&numeric);
        assert!(err < 1e-7, "max abs gradient error {err}: {analytic:?} vs {numeric:?}");
    }

    fn sample(r: usize, c: usize, seed: f64) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|i| ((i as f64 + seed) * 1.37).sin()).collect())
    }

    #[test]
    fn elementwise_and_reductions() {
        check_unary(sample(3, 4, 0.1), |g, x| g.activation(x, Activation::Gelu));
        check_unary(sample(3, 4, 0.2), |g, x| g.tanh(x));
        check_unary(sample(3, 4, 0.3), |g, x| g.sigmoid(x));
        check_unary(sample(3, 4, 0.4), |g, x| g.abs(x));
        check_unary(sample(3, 4, 0.5), |g, x| g.affine(x, -2.0, 1.0));
        check_unary(sample(3, 4, 0.6), |g, x| g.mean_all(x));
        check_unary(sample(3, 4, 0.65), |g, x| g.clamp(x, -0.5, 0.5));
        check_unary(sample(3, 4, 0.6), |g, x| g.transpose(x));
        check_unary(sample(3, 4, 0.7), |g, x| g.mul(x, x));
    }

    #[test]
    fn row_ops() {
        check_unary(sample(3, 5, 1.0), |g, x| g.layer_norm(x, 1e-5));
        check_unary(sample(3, 5, 1.1), |g, x| g.normalize_rows(x));
        check_unary(sample(3, 5, 1.2), |g, x| g.log_softmax_rows(x));
        check_unary(sample(4, 4, 1.3), |g, x| g.diag(x));
        check_unary(sample(4, 3, 1.4), |g, x| g.gather_rows(x, &[2, 0, 2]));
        check_unary(sample(4, 3, 1.5), |g, x| g.slice_cols(x, 1, 2));
        check_unary(sample(2, 3, 1.6), |g, x| {
            let y = g.scale(x, 2.0);
            let c = g.concat_cols(&[x, y]);
            let r = g.concat_rows(&[c, c]);
            g.select_rows(&[true, false, false, true], r, r)
        });
    }

    #[test]
    fn broadcast_and_matmul() {
        let w = sample(3, 2, 2.0);
        check_unary(sample(4, 3, 2.1), |g, x| {
            let wv = g.constant(w.clone());
            g.matmul(x, wv)
        });
        let a = sample(4, 3, 2.2);
        check_unary(sample(3, 2, 2.3), |g, x| {
            let av = g.constant(a.clone());
            g.matmul(av, x)
        });
        let b = sample(4, 3, 2.4);
        check_unary(sample(1, 3, 2.5), |g, row| {
            let bv = g.constant(b.clone());
            let s = g.add_row(bv, row);
            g.mul_row(s, row)
        });
    }

    #[test]
    fn attention_gradients() {
        let spec = AttentionSpec { batch: 2, q_len: 2, k_len: 3, heads: 2, key_mask: vec![true, true, false, true, false, true] };
        let kv = sample(6, 4, 3.0);
        let q = sample(4, 4, 3.1);
        let s = spec.clone();
        check_unary(q.clone(), |g, x| {
            let k = g.constant(kv.clone());
            g.attention(x, k, k, s.clone())
        });
        let s = spec.clone();
        check_unary(kv.clone(), |g, x| {
            let qv = g.constant(q.clone());
            g.attention(qv, x, x, s.clone())
        });
    }

    #[test]
    fn attention_weights_normalize_and_ignore_masked_keys() {
        let mut g = Graph::new();
        let q = g.constant(sample(2, 4, 0.0));
        let k = g.constant(sample(6, 4, 1.0));
        let spec = AttentionSpec { batch: 2, q_len: 1, k_len: 3, heads: 2, key_mask: vec![true, false, true, true, true, true] };
        let out = g.attention(q, k, k, spec);
        let w = g.attention_weights(out).unwrap();
        for chunk in w.chunks(3) {
            assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(w[1], 0.0);
        assert_eq!(w[4], 0.0);
    }

    #[test]
    fn conv_gradients() {
        let kernel = sample(3, 3, 4.0);
        let other = sample(2, 5, 4.1);
        check_unary(sample(2, 5, 4.2), |g, x| {
            let k = g.constant(kernel.clone());
            let b = g.constant(Matrix::scalar(0.3));
            let o = g.constant(other.clone());
            g.conv1d(&[x, o, x], k, b)
        });
        let chans = [sample(2, 5, 5.0), sample(2, 5, 5.1), sample(2, 5, 5.2)];
        check_unary(kernel.clone(), |g, k| {
            let c: Vec<Var> = chans.iter().map(|m| g.constant(m.clone())).collect();
            let b = g.constant(Matrix::scalar(0.0));
            g.conv1d(&c, k, b)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Matrix::filled(2, 2, 1.0));
        let x = g.variable(Matrix::filled(2, 2, 2.0));
        let p = g.mul(c, x);
        let l = g.sum_all(p);
        let grads = g.backward(l);
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(x).unwrap(), &Matrix::filled(2, 2, 1.0));
    }
}
