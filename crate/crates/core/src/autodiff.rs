//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records each operation as a node; [`Tape::backward`] walks the
//! nodes in reverse and accumulates exact gradients. The op set is the small
//! closed vocabulary the models here need; every op has a hand-derived
//! adjoint, and the whole tape is covered by finite-difference tests.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fx;
use crate::linalg::Matrix;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a * bᵀ
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    /// Broadcast-add a `1 x m` row onto every row of an `n x m` matrix.
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    /// Row-wise softmax; columns with `admissible[c] == false` get probability
    /// zero (their logits are treated as negative infinity).
    SoftmaxRows { x: Var, admissible: Vec<bool> },
    /// Row-wise layer normalization with learned gain and bias (`1 x m`).
    LayerNorm { x: Var, gain: Var, bias: Var },
    /// Output row i = table row idx[i].
    GatherRows { table: Var, idx: Vec<usize> },
    /// Stack a `1 x m` row n times.
    RepeatRow { row: Var, n: usize },
    /// Row i comes from `b` where sel[i], else from `a`.
    RowSelect { a: Var, b: Var, sel: Vec<bool> },
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    SliceRows { x: Var, idx: Vec<usize> },
    SliceCols { x: Var, start: usize, len: usize },
    /// Column-wise mean over rows: `n x m` -> `1 x m`.
    MeanRows(Var),
    MeanAll(Var),
    SumAll(Var),
    /// Mean squared difference against a constant target, same shape.
    MseVs { pred: Var, target: Matrix },
    /// Weighted binary cross-entropy from a `1 x 1` logit.
    BceLogit { logit: Var, target: f64, weight: f64 },
    /// Softmax cross-entropy of a `1 x k` logit row against a class index.
    CeLogitsRow { logits: Var, target: usize },
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        self.push(value, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        self.push(value, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "hadamard shape mismatch");
        let value = Matrix::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) * y.get(r, c));
        self.push(value, Op::Hadamard(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows(), 1, "add_row expects a 1 x m row");
        assert_eq!(x.cols(), r.cols(), "add_row width mismatch");
        let value = Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) + r.get(0, j));
        self.push(value, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(fx::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(fx::sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(fx::softplus);
        self.push(value, Op::Softplus(a))
    }

    /// Row-wise masked softmax. Panics if a row has no admissible column.
    pub fn softmax_rows(&mut self, x: Var, admissible: Vec<bool>) -> Var {
        let v = self.value(x);
        assert_eq!(admissible.len(), v.cols(), "admissible mask width mismatch");
        assert!(admissible.iter().any(|&a| a), "softmax with no admissible columns");
        let mut value = Matrix::zeros(v.rows(), v.cols());
        for i in 0..v.rows() {
            let row = v.row(i);
            let mut max = f64::NEG_INFINITY;
            for (j, &a) in admissible.iter().enumerate() {
                if a && row[j] > max {
                    max = row[j];
                }
            }
            let mut denom = 0.0;
            for (j, &a) in admissible.iter().enumerate() {
                if a {
                    let e = fx::exp(row[j] - max);
                    value.set(i, j, e);
                    denom += e;
                }
            }
            for j in 0..v.cols() {
                value.set(i, j, value.get(i, j) / denom);
            }
        }
        self.push(value, Op::SoftmaxRows { x, admissible })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (v, g, b) = (self.value(x), self.value(gain), self.value(bias));
        assert_eq!(g.rows(), 1);
        assert_eq!(b.rows(), 1);
        assert_eq!(g.cols(), v.cols());
        assert_eq!(b.cols(), v.cols());
        let m = v.cols() as f64;
        let mut value = Matrix::zeros(v.rows(), v.cols());
        for i in 0..v.rows() {
            let row = v.row(i);
            let mean = row.iter().sum::<f64>() / m;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / m;
            let inv = 1.0 / fx::sqrt(var + LN_EPS);
            for j in 0..v.cols() {
                value.set(i, j, g.get(0, j) * (row[j] - mean) * inv + b.get(0, j));
            }
        }
        self.push(value, Op::LayerNorm { x, gain, bias })
    }

    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut value = Matrix::zeros(idx.len(), t.cols());
        for (i, &r) in idx.iter().enumerate() {
            value.row_mut(i).copy_from_slice(t.row(r));
        }
        self.push(value, Op::GatherRows { table, idx })
    }

    pub fn repeat_row(&mut self, row: Var, n: usize) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "repeat_row expects a 1 x m row");
        let mut value = Matrix::zeros(n, r.cols());
        for i in 0..n {
            value.row_mut(i).copy_from_slice(r.row(0));
        }
        self.push(value, Op::RepeatRow { row, n })
    }

    pub fn row_select(&mut self, a: Var, b: Var, sel: Vec<bool>) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "row_select shape mismatch");
        assert_eq!(sel.len(), x.rows());
        let mut value = x.clone();
        for (i, &s) in sel.iter().enumerate() {
            if s {
                value.row_mut(i).copy_from_slice(y.row(i));
            }
        }
        self.push(value, Op::RowSelect { a, b, sel })
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols(), y.cols(), "concat_rows width mismatch");
        let mut data = Vec::with_capacity((x.rows() + y.rows()) * x.cols());
        data.extend_from_slice(x.data());
        data.extend_from_slice(y.data());
        let value = Matrix::from_vec(x.rows() + y.rows(), x.cols(), data);
        self.push(value, Op::ConcatRows(a, b))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.rows(), y.rows(), "concat_cols height mismatch");
        let value = Matrix::from_fn(x.rows(), x.cols() + y.cols(), |r, c| {
            if c < x.cols() {
                x.get(r, c)
            } else {
                y.get(r, c - x.cols())
            }
        });
        self.push(value, Op::ConcatCols(a, b))
    }

    pub fn slice_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let v = self.value(x);
        let mut value = Matrix::zeros(idx.len(), v.cols());
        for (i, &r) in idx.iter().enumerate() {
            value.row_mut(i).copy_from_slice(v.row(r));
        }
        self.push(value, Op::SliceRows { x, idx })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        assert!(start + len <= v.cols(), "slice_cols out of range");
        let value = Matrix::from_fn(v.rows(), len, |r, c| v.get(r, start + c));
        self.push(value, Op::SliceCols { x, start, len })
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        assert!(v.rows() > 0);
        let n = v.rows() as f64;
        let mut value = Matrix::zeros(1, v.cols());
        for i in 0..v.rows() {
            for j in 0..v.cols() {
                value.set(0, j, value.get(0, j) + v.get(i, j) / n);
            }
        }
        self.push(value, Op::MeanRows(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = (v.rows() * v.cols()) as f64;
        let s = v.data().iter().sum::<f64>() / n;
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::MeanAll(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::SumAll(x))
    }

    pub fn mse_vs(&mut self, pred: Var, target: Matrix) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "mse_vs shape mismatch");
        let n = (p.rows() * p.cols()) as f64;
        let s = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::MseVs { pred, target })
    }

    pub fn bce_logit(&mut self, logit: Var, target: f64, weight: f64) -> Var {
        let z = self.value(logit);
        assert_eq!(z.shape(), (1, 1), "bce_logit expects a scalar logit");
        let z = z.get(0, 0);
        // softplus(z) - y z, computed stably.
        let loss = weight * (fx::softplus(-fx::abs(z)) + z.max(0.0) - target * z);
        self.push(Matrix::from_vec(1, 1, vec![loss]), Op::BceLogit { logit, target, weight })
    }

    pub fn ce_logits_row(&mut self, logits: Var, target: usize) -> Var {
        let v = self.value(logits);
        assert_eq!(v.rows(), 1, "ce_logits_row expects a 1 x k row");
        assert!(target < v.cols(), "class index out of range");
        let row = v.row(0);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + fx::ln(row.iter().map(|&x| fx::exp(x - max)).sum::<f64>());
        let loss = lse - row[target];
        self.push(Matrix::from_vec(1, 1, vec![loss]), Op::CeLogitsRow { logits, target })
    }

    /// Reverse pass from a `1 x 1` loss node. Returns one gradient slot per
    /// node; look up parameter gradients with [`Gradients::of`].
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.shape() != (1, 1) {
            return Err(Error::Shape("backward expects a scalar loss".to_string()));
        }
        if !loss_value.get(0, 0).is_finite() {
            return Err(Error::Numerical("loss is not finite".to_string()));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));
        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn add_grad(grads: &mut [Option<Matrix>], v: Var, delta: Matrix) {
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let value = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                Self::add_grad(grads, *a, g.matmul_nt(self.value(*b)));
                Self::add_grad(grads, *b, self.value(*a).matmul_tn(g));
            }
            Op::MatMulNt(a, b) => {
                Self::add_grad(grads, *a, g.matmul(self.value(*b)));
                Self::add_grad(grads, *b, g.matmul_tn(self.value(*a)));
            }
            Op::Add(a, b) => {
                Self::add_grad(grads, *a, g.clone());
                Self::add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                Self::add_grad(grads, *a, g.clone());
                Self::add_grad(grads, *b, g.scale(-1.0));
            }
            Op::Hadamard(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let da = Matrix::from_fn(g.rows(), g.cols(), |r, c| g.get(r, c) * y.get(r, c));
                let db = Matrix::from_fn(g.rows(), g.cols(), |r, c| g.get(r, c) * x.get(r, c));
                Self::add_grad(grads, *a, da);
                Self::add_grad(grads, *b, db);
            }
            Op::AddRow(a, row) => {
                Self::add_grad(grads, *a, g.clone());
                let mut dr = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        dr.set(0, j, dr.get(0, j) + g.get(i, j));
                    }
                }
                Self::add_grad(grads, *row, dr);
            }
            Op::Scale(a, s) => Self::add_grad(grads, *a, g.scale(*s)),
            Op::Tanh(a) => {
                let da =
                    Matrix::from_fn(g.rows(), g.cols(), |r, c| {
                        let y = value.get(r, c);
                        g.get(r, c) * (1.0 - y * y)
                    });
                Self::add_grad(grads, *a, da);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let da = Matrix::from_fn(g.rows(), g.cols(), |r, c| {
                    g.get(r, c) * gelu_deriv(x.get(r, c))
                });
                Self::add_grad(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let da = Matrix::from_fn(g.rows(), g.cols(), |r, c| {
                    let y = value.get(r, c);
                    g.get(r, c) * y * (1.0 - y)
                });
                Self::add_grad(grads, *a, da);
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                let da = Matrix::from_fn(g.rows(), g.cols(), |r, c| {
                    g.get(r, c) * fx::sigmoid(x.get(r, c))
                });
                Self::add_grad(grads, *a, da);
            }
            Op::SoftmaxRows { x, admissible } => {
                let y = value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let mut dot = 0.0;
                    for j in 0..y.cols() {
                        dot += g.get(i, j) * y.get(i, j);
                    }
                    for (j, &adm) in admissible.iter().enumerate() {
                        if adm {
                            dx.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                }
                Self::add_grad(grads, *x, dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let v = self.value(*x);
                let gn = self.value(*gain);
                let m = v.cols() as f64;
                let mut dx = Matrix::zeros(v.rows(), v.cols());
                let mut dg = Matrix::zeros(1, v.cols());
                let mut db = Matrix::zeros(1, v.cols());
                for i in 0..v.rows() {
                    let row = v.row(i);
                    let mean = row.iter().sum::<f64>() / m;
                    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / m;
                    let inv = 1.0 / fx::sqrt(var + LN_EPS);
                    // dL/dx̂ and its row statistics.
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..v.cols() {
                        let xh = (row[j] - mean) * inv;
                        let dxh = g.get(i, j) * gn.get(0, j);
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                        dg.set(0, j, dg.get(0, j) + g.get(i, j) * xh);
                        db.set(0, j, db.get(0, j) + g.get(i, j));
                    }
                    for j in 0..v.cols() {
                        let xh = (row[j] - mean) * inv;
                        let dxh = g.get(i, j) * gn.get(0, j);
                        dx.set(i, j, inv * (dxh - sum_dxh / m - xh * sum_dxh_xh / m));
                    }
                }
                Self::add_grad(grads, *x, dx);
                Self::add_grad(grads, *gain, dg);
                Self::add_grad(grads, *bias, db);
            }
            Op::GatherRows { table, idx } => {
                let t = self.value(*table);
                let mut dt = Matrix::zeros(t.rows(), t.cols());
                for (i, &r) in idx.iter().enumerate() {
                    for j in 0..t.cols() {
                        dt.set(r, j, dt.get(r, j) + g.get(i, j));
                    }
                }
                Self::add_grad(grads, *table, dt);
            }
            Op::RepeatRow { row, n } => {
                let mut dr = Matrix::zeros(1, g.cols());
                for i in 0..*n {
                    for j in 0..g.cols() {
                        dr.set(0, j, dr.get(0, j) + g.get(i, j));
                    }
                }
                Self::add_grad(grads, *row, dr);
            }
            Op::RowSelect { a, b, sel } => {
                let mut da = Matrix::zeros(g.rows(), g.cols());
                let mut db = Matrix::zeros(g.rows(), g.cols());
                for (i, &s) in sel.iter().enumerate() {
                    let dst = if s { &mut db } else { &mut da };
                    dst.row_mut(i).copy_from_slice(g.row(i));
                }
                Self::add_grad(grads, *a, da);
                Self::add_grad(grads, *b, db);
            }
            Op::ConcatRows(a, b) => {
                let an = self.value(*a).rows();
                let da = Matrix::from_fn(an, g.cols(), |r, c| g.get(r, c));
                let db = Matrix::from_fn(g.rows() - an, g.cols(), |r, c| g.get(an + r, c));
                Self::add_grad(grads, *a, da);
                Self::add_grad(grads, *b, db);
            }
            Op::ConcatCols(a, b) => {
                let ac = self.value(*a).cols();
                let da = Matrix::from_fn(g.rows(), ac, |r, c| g.get(r, c));
                let db = Matrix::from_fn(g.rows(), g.cols() - ac, |r, c| g.get(r, ac + c));
                Self::add_grad(grads, *a, da);
                Self::add_grad(grads, *b, db);
            }
            Op::SliceRows { x, idx } => {
                let v = self.value(*x);
                let mut dx = Matrix::zeros(v.rows(), v.cols());
                for (i, &r) in idx.iter().enumerate() {
                    for j in 0..v.cols() {
                        dx.set(r, j, dx.get(r, j) + g.get(i, j));
                    }
                }
                Self::add_grad(grads, *x, dx);
            }
            Op::SliceCols { x, start, len } => {
                let v = self.value(*x);
                let mut dx = Matrix::zeros(v.rows(), v.cols());
                for r in 0..g.rows() {
                    for c in 0..*len {
                        dx.set(r, start + c, g.get(r, c));
                    }
                }
                Self::add_grad(grads, *x, dx);
            }
            Op::MeanRows(x) => {
                let v = self.value(*x);
                let n = v.rows() as f64;
                let dx = Matrix::from_fn(v.rows(), v.cols(), |_, c| g.get(0, c) / n);
                Self::add_grad(grads, *x, dx);
            }
            Op::MeanAll(x) => {
                let v = self.value(*x);
                let n = (v.rows() * v.cols()) as f64;
                let s = g.get(0, 0) / n;
                Self::add_grad(grads, *x, Matrix::from_fn(v.rows(), v.cols(), |_, _| s));
            }
            Op::SumAll(x) => {
                let v = self.value(*x);
                let s = g.get(0, 0);
                Self::add_grad(grads, *x, Matrix::from_fn(v.rows(), v.cols(), |_, _| s));
            }
            Op::MseVs { pred, target } => {
                let p = self.value(*pred);
                let n = (p.rows() * p.cols()) as f64;
                let s = g.get(0, 0);
                let dp = Matrix::from_fn(p.rows(), p.cols(), |r, c| {
                    s * 2.0 * (p.get(r, c) - target.get(r, c)) / n
                });
                Self::add_grad(grads, *pred, dp);
            }
            Op::BceLogit { logit, target, weight } => {
                let z = self.value(*logit).get(0, 0);
                let d = g.get(0, 0) * weight * (fx::sigmoid(z) - target);
                Self::add_grad(grads, *logit, Matrix::from_vec(1, 1, vec![d]));
            }
            Op::CeLogitsRow { logits, target } => {
                let v = self.value(*logits);
                let row = v.row(0);
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let denom = row.iter().map(|&x| fx::exp(x - max)).sum::<f64>();
                let s = g.get(0, 0);
                let dl = Matrix::from_fn(1, v.cols(), |_, j| {
                    let p = fx::exp(row[j] - max) / denom;
                    s * (p - if j == *target { 1.0 } else { 0.0 })
                });
                Self::add_grad(grads, *logits, dl);
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` when the loss does not depend
    /// on it.
    pub fn of(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fx::tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = fx::tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    /// Central finite differences through an arbitrary scalar-valued
    /// function of flat leaf inputs.
    fn finite_diff(
        f: &dyn Fn(&[Vec<f64>]) -> f64,
        inputs: &[Vec<f64>],
        leaf: usize,
        coord: usize,
        h: f64,
    ) -> f64 {
        let mut plus = inputs.to_vec();
        plus[leaf][coord] += h;
        let mut minus = inputs.to_vec();
        minus[leaf][coord] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    fn check_all_grads(
        shapes: &[(usize, usize)],
        build: &dyn Fn(&mut Tape, &[Var]) -> Var,
        seed: u64,
        tol: f64,
    ) {
        let mut rng = stream(seed, &[99]);
        let inputs: Vec<Vec<f64>> = shapes
            .iter()
            .map(|&(r, c)| (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect())
            .collect();
        let eval = |vals: &[Vec<f64>]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals
                .iter()
                .zip(shapes)
                .map(|(v, &(r, c))| tape.leaf(Matrix::from_vec(r, c, v.clone())))
                .collect();
            let out = build(&mut tape, &vars);
            tape.value(out).get(0, 0)
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(shapes)
            .map(|(v, &(r, c))| tape.leaf(Matrix::from_vec(r, c, v.clone())))
            .collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        for (leaf, &(r, c)) in shapes.iter().enumerate() {
            let g = grads.of(vars[leaf]);
            for coord in 0..r * c {
                let analytic = g.map_or(0.0, |m| m.data()[coord]);
                let numeric = finite_diff(&eval, &inputs, leaf, coord, 1e-5);
                let denom = analytic.abs().max(numeric.abs());
                if denom > 1e-6 {
                    assert!(
                        (analytic - numeric).abs() / denom < tol,
                        "leaf {leaf} coord {coord}: analytic {analytic} vs numeric {numeric}"
                    );
                } else {
                    assert!((analytic - numeric).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn composite_network_matches_finite_differences() {
        // Exercises matmul, add_row, gelu, layer_norm, softmax, slicing,
        // concat, mean, and mse in one graph.
        let shapes = [(4, 3), (3, 3), (1, 3), (1, 3), (1, 3), (1, 3)];
        let admissible = vec![true, false, true, true];
        check_all_grads(
            &shapes,
            &move |tape, v| {
                let h = tape.matmul(v[0], v[1]);
                let h = tape.add_row(h, v[2]);
                let h = tape.layer_norm(h, v[3], v[4]);
                let h = tape.gelu(h);
                let scores = tape.matmul_nt(h, h);
                let att = tape.softmax_rows(scores, admissible.clone());
                let ctx = tape.matmul(att, h);
                let first = tape.slice_rows(ctx, vec![0, 2]);
                let pooled = tape.mean_rows(first);
                let joined = tape.concat_cols(pooled, v[5]);
                let target = Matrix::zeros(1, 6);
                tape.mse_vs(joined, target)
            },
            7,
            1e-5,
        );
    }

    #[test]
    fn gather_select_and_losses_match_finite_differences() {
        let shapes = [(5, 4), (1, 4), (2, 4), (1, 2)];
        check_all_grads(
            &shapes,
            &|tape, v| {
                let gathered = tape.gather_rows(v[0], vec![1, 1, 4]);
                let rep = tape.repeat_row(v[1], 3);
                let sel = tape.row_select(gathered, rep, vec![false, true, false]);
                let picked = tape.slice_cols(sel, 1, 2);
                let pooled = tape.mean_rows(picked);
                let scalar = tape.sum_all(pooled);
                let bce = tape.bce_logit(scalar, 1.0, 1.3);
                let ce = tape.ce_logits_row(v[3], 1);
                let both = tape.add(bce, ce);
                let rows = tape.concat_rows(v[2], v[2]);
                let tanh = tape.tanh(rows);
                let sig = tape.sigmoid(tanh);
                let sp = tape.softplus(sig);
                let extra = tape.mean_all(sp);
                let scaled = tape.scale(extra, 0.7);
                let sum = tape.add(both, scaled);
                let had = tape.hadamard(sum, sum);
                let diff = tape.sub(had, sum);
                tape.sum_all(diff)
            },
            13,
            1e-5,
        );
    }

    #[test]
    fn constant_loss_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_vec(1, 2, vec![1.0, 2.0]));
        let c = tape.leaf(Matrix::from_vec(1, 1, vec![5.0]));
        let loss = tape.sum_all(c);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.of(x).is_none());
    }

    #[test]
    fn linear_loss_gradient_is_coefficient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::from_vec(1, 1, vec![0.3]));
        let loss = tape.scale(w, 2.5);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(w).unwrap().get(0, 0), 2.5);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_vec(1, 1, vec![f64::INFINITY]));
        let loss = tape.sum_all(x);
        assert!(matches!(tape.backward(loss), Err(Error::Numerical(_))));
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_over_admissible() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_vec(2, 3, vec![0.1, 9.0, -0.4, 2.0, -3.0, 0.0]));
        let y = tape.softmax_rows(x, vec![true, false, true]);
        let v = tape.value(y);
        for i in 0..2 {
            assert_eq!(v.get(i, 1), 0.0);
            let s: f64 = v.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
