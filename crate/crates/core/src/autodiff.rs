//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already a topological order and [`Graph::backward`] is a single reverse
//! sweep. Leaves created with `requires_grad = false` (constants, frozen
//! parameters) stop gradient flow: no gradient is computed for any node whose
//! inputs are all such leaves.
//!
//! Shape mismatches are programming errors and panic.

use crate::tensor::{gemm, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ColSlice(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    RepeatRow(Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
    Transpose(Var),
    WeightedSum(Var, Mat),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node that needed one.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar: node is not 1x1");
        m.get(0, 0)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Mat, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let v = Mat::from_vec(va.rows(), va.cols(), data);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Sub(a, b), ng)
    }

    /// Adds the 1×c row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows(), 1, "add_row: bias must be a single row");
        assert_eq!(va.cols(), vr.cols(), "add_row: width mismatch");
        let mut v = va.clone();
        for r in 0..v.rows() {
            for (x, b) in v.row_mut(r).iter_mut().zip(vr.data()) {
                *x += b;
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let v = Mat::from_vec(va.rows(), va.cols(), data);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        let ng = self.ng(&[a]);
        self.push(v, Op::Gelu(a), ng)
    }

    /// Row-wise layer normalization with affine 1×c `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let (n, c) = vx.shape();
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!(g.shape(), (1, c), "layer_norm: gamma shape");
        assert_eq!(b.shape(), (1, c), "layer_norm: beta shape");
        let mut xhat = Mat::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        let mut out = Mat::zeros(n, c);
        for r in 0..n {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat.set(r, j, h);
                out.set(r, j, h * g.get(0, j) + b.get(0, j));
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::LogSoftmaxRows(a), ng)
    }

    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.cols(), "col_slice: out of range");
        let v = Mat::from_fn(va.rows(), len, |r, c| va.get(r, start + c));
        let ng = self.ng(&[a]);
        self.push(v, Op::ColSlice(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let vp = self.value(*p);
            assert_eq!(vp.rows(), rows, "concat_cols: row mismatch");
            for r in 0..rows {
                v.row_mut(r)[off..off + vp.cols()].copy_from_slice(vp.row(r));
            }
            off += vp.cols();
        }
        let ng = self.ng(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let vp = self.value(*p);
            assert_eq!(vp.cols(), cols, "concat_rows: column mismatch");
            data.extend_from_slice(vp.data());
            rows += vp.rows();
        }
        let ng = self.ng(parts);
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Output row `i` is input row `idx[i]`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let va = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * va.cols());
        for &i in idx {
            data.extend_from_slice(va.row(i));
        }
        let v = Mat::from_vec(idx.len(), va.cols(), data);
        let ng = self.ng(&[a]);
        self.push(v, Op::GatherRows(a, idx.to_vec()), ng)
    }

    /// Column means as a 1×c row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert!(va.rows() > 0, "mean_rows: empty input");
        let n = va.rows() as f64;
        let mut v = Mat::zeros(1, va.cols());
        for r in 0..va.rows() {
            for (o, x) in v.row_mut(0).iter_mut().zip(va.row(r)) {
                *o += x;
            }
        }
        for o in v.data_mut() {
            *o /= n;
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::MeanRows(a), ng)
    }

    /// Stacks the 1×c row `a` into an n×c matrix.
    pub fn repeat_row(&mut self, a: Var, n: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows(), 1, "repeat_row: input must be a single row");
        let mut data = Vec::with_capacity(n * va.cols());
        for _ in 0..n {
            data.extend_from_slice(va.data());
        }
        let v = Mat::from_vec(n, va.cols(), data);
        let ng = self.ng(&[a]);
        self.push(v, Op::RepeatRow(a), ng)
    }

    /// Scales every row to unit L2 norm. Panics on a zero row; callers validate first.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let mut norms = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(n > 0.0, "normalize_rows: zero-norm row {r}");
            for x in row.iter_mut() {
                *x /= n;
            }
            norms.push(n);
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::NormalizeRows { x: a, norms }, ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(&[a]);
        self.push(v, Op::Transpose(a), ng)
    }

    /// Scalar `Σ w ∘ a` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, w: Mat) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), w.shape(), "weighted_sum: shape mismatch");
        let s: f64 = va.data().iter().zip(w.data()).map(|(x, y)| x * y).sum();
        let ng = self.ng(&[a]);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::WeightedSum(a, w), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).shape();
        self.weighted_sum(a, Mat::filled(r, c, 1.0))
    }

    /// Gradients of the 1×1 node `out` with respect to every node that needs one.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.value(out).shape(), (1, 1), "backward: output must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::filled(1, 1, 1.0));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Accumulates `op(a)·op(b)` into the gradient slot of `v` without a temporary.
    fn acc_gemm(&self, grads: &mut [Option<Mat>], v: Var, a: &Mat, ta: bool, b: &Mat, tb: bool) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let shape = self.value(v).shape();
        match &mut grads[v.0] {
            Some(existing) => gemm(a, ta, b, tb, existing, 1.0),
            slot @ None => {
                let mut m = Mat::zeros(shape.0, shape.1);
                gemm(a, ta, b, tb, &mut m, 0.0);
                *slot = Some(m);
            }
        }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                self.acc_gemm(grads, *a, g, false, self.value(*b), true);
                self.acc_gemm(grads, *b, self.value(*a), true, g, false);
            }
            Op::MatMulT(a, b) => {
                self.acc_gemm(grads, *a, g, false, self.value(*b), false);
                self.acc_gemm(grads, *b, g, true, self.value(*a), false);
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scale(-1.0));
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.needs_grad(*row) {
                    let mut s = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in s.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    self.acc(grads, *row, s);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *a, Mat::from_vec(g.rows(), g.cols(), d));
                }
                if self.needs_grad(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *b, Mat::from_vec(g.rows(), g.cols(), d));
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.scale(*s)),
            Op::Gelu(a) => {
                let va = self.value(*a);
                let d = va
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.acc(grads, *a, Mat::from_vec(va.rows(), va.cols(), d));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, c) = xhat.shape();
                let gam = self.value(*gamma);
                if self.needs_grad(*gamma) || self.needs_grad(*beta) {
                    let mut dg = Mat::zeros(1, c);
                    let mut db = Mat::zeros(1, c);
                    for r in 0..n {
                        for j in 0..c {
                            dg.data_mut()[j] += g.get(r, j) * xhat.get(r, j);
                            db.data_mut()[j] += g.get(r, j);
                        }
                    }
                    self.acc(grads, *gamma, dg);
                    self.acc(grads, *beta, db);
                }
                if self.needs_grad(*x) {
                    let mut dx = Mat::zeros(n, c);
                    let cf = c as f64;
                    for r in 0..n {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dh = g.get(r, j) * gam.get(0, j);
                            s1 += dh;
                            s2 += dh * xhat.get(r, j);
                        }
                        for j in 0..c {
                            let dh = g.get(r, j) * gam.get(0, j);
                            let v = inv_std[r] * (dh - s1 / cf - xhat.get(r, j) * s2 / cf);
                            dx.set(r, j, v);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = y.get(r, j) * (g.get(r, j) - dot);
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gs: f64 = g.row(r).iter().sum();
                    for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = g.get(r, j) - y.get(r, j).exp() * gs;
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::ColSlice(a, start) => {
                if self.needs_grad(*a) {
                    let (rows, cols) = self.value(*a).shape();
                    let mut dx = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    self.acc(grads, *a, dx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.needs_grad(*p) {
                        let d = Mat::from_fn(g.rows(), w, |r, c| g.get(r, off + c));
                        self.acc(grads, *p, d);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let (rows, cols) = self.value(*p).shape();
                    if self.needs_grad(*p) {
                        let d = Mat::from_vec(rows, cols, g.data()[off * cols..(off + rows) * cols].to_vec());
                        self.acc(grads, *p, d);
                    }
                    off += rows;
                }
            }
            Op::GatherRows(a, idx) => {
                if self.needs_grad(*a) {
                    let (rows, cols) = self.value(*a).shape();
                    let mut dx = Mat::zeros(rows, cols);
                    for (i, &src) in idx.iter().enumerate() {
                        for (o, x) in dx.row_mut(src).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    self.acc(grads, *a, dx);
                }
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).rows();
                let row = g.scale(1.0 / rows as f64);
                let mut data = Vec::with_capacity(rows * g.cols());
                for _ in 0..rows {
                    data.extend_from_slice(row.data());
                }
                self.acc(grads, *a, Mat::from_vec(rows, g.cols(), data));
            }
            Op::RepeatRow(a) => {
                let mut s = Mat::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, x) in s.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                self.acc(grads, *a, s);
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut dx = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = (g.get(r, j) - y.get(r, j) * dot) / norms[r];
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::WeightedSum(a, w) => self.acc(grads, *a, w.scale(g.get(0, 0))),
        }
    }
}

pub mod gradcheck {
    //! Central finite-difference oracle for graph-built scalar functions.

    use super::*;

    pub const EPS: f64 = 1e-4;
    pub const TOL: f64 = 1e-4;
    /// Denominator floor for the relative error, so that gradients that are
    /// numerically zero compare on an absolute scale.
    pub const FLOOR: f64 = 1e-6;

    pub fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
    }

    /// Checks d f / d inputs[i] for every input element. `f` rebuilds the
    /// scalar on a fresh graph from leaf variables. Returns the worst
    /// relative error.
    pub fn check<F>(inputs: &[Mat], f: F) -> f64
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone(), true)).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let eval = |perturbed: &[Mat]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = perturbed.iter().map(|m| g.leaf(m.clone(), true)).collect();
            let out = f(&mut g, &vars);
            g.scalar(out)
        };
        let mut worst: f64 = 0.0;
        let mut work: Vec<Mat> = inputs.to_vec();
        for (k, v) in vars.iter().enumerate() {
            let zero = Mat::zeros(inputs[k].rows(), inputs[k].cols());
            let analytic = grads.get(*v).cloned().unwrap_or(zero);
            for e in 0..inputs[k].len() {
                let orig = inputs[k].data()[e];
                work[k].data_mut()[e] = orig + EPS;
                let fp = eval(&work);
                work[k].data_mut()[e] = orig - EPS;
                let fm = eval(&work);
                work[k].data_mut()[e] = orig;
                let numeric = (fp - fm) / (2.0 * EPS);
                worst = worst.max(rel_err(analytic.data()[e], numeric));
            }
        }
        worst
    }
}
