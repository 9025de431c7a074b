//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records matrix operations during a forward pass; calling
//! [`Tape::backward`] on a scalar output replays the record in reverse
//! topological order (which is simply reverse insertion order) and
//! accumulates gradients into every node with `requires_grad`.
//!
//! Tapes are single-threaded and short-lived: one tape per user per
//! optimization phase. Nodes are plain indices into their tape, so they are
//! `Copy`; values written to a tape are never mutated afterwards.
//!
//! Item embeddings are too large to clone onto every tape, so they stay
//! outside: [`Tape::gather`] copies the needed rows in and the backward pass
//! accumulates sparse per-row gradients, retrieved with
//! [`Tape::take_table_grads`]. A tape supports one logical external table.

use std::collections::HashMap;

use crate::error::{DmanError, Result};
use crate::matrix::{BoolMat, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    StopGrad,
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sigmoid(usize),
    SoftmaxRows(usize),
    SquashRows(usize),
    ConcatRows(usize, usize),
    SliceRows { parent: usize, start: usize },
    Gather(Vec<usize>),
    Sum(usize),
    FrobSq(usize),
    LogSumExp(usize),
}

struct Slot {
    value: Matrix,
    grad: Matrix,
    requires_grad: bool,
    op: Op,
}

pub const SQUASH_EPS: f64 = 1e-9;

#[derive(Default)]
pub struct Tape {
    slots: Vec<Slot>,
    table_grads: HashMap<usize, Vec<f64>>,
    table_width: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            slots: Vec::new(),
            table_grads: HashMap::new(),
            table_width: 0,
        }
    }

    fn push(&mut self, value: Matrix, requires_grad: bool, op: Op) -> Node {
        debug_assert!(value.all_finite(), "non-finite value written to tape");
        let (r, c) = value.shape();
        self.slots.push(Slot {
            value,
            grad: Matrix::zeros(r, c),
            requires_grad,
            op,
        });
        Node(self.slots.len() - 1)
    }

    fn parents_require(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.slots[i].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Node {
        self.push(value, true, Op::Leaf)
    }

    /// A gradient-free leaf.
    pub fn constant(&mut self, value: Matrix) -> Node {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, n: Node) -> &Matrix {
        &self.slots[n.0].value
    }

    /// Gradient of the most recent `backward` w.r.t. a leaf node.
    /// Non-leaf gradients are consumed during the backward sweep.
    pub fn grad(&self, n: Node) -> &Matrix {
        &self.slots[n.0].grad
    }

    pub fn scalar(&self, n: Node) -> f64 {
        let v = self.value(n);
        assert_eq!(v.shape(), (1, 1), "scalar() on non-1x1 node");
        v.get(0, 0)
    }

    // ── forward ops ─────────────────────────────────────────────────

    /// Pass-through value; the backward sweep propagates nothing into `x`.
    pub fn stop_gradient(&mut self, x: Node) -> Node {
        let v = self.value(x).clone();
        self.push(v, false, Op::StopGrad)
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.parents_require(&[a.0, b.0]);
        Ok(self.push(v, rg, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.parents_require(&[a.0, b.0]);
        Ok(self.push(v, rg, Op::Sub(a.0, b.0)))
    }

    pub fn hadamard(&mut self, a: Node, b: Node) -> Result<Node> {
        let v = self.value(a).hadamard(self.value(b))?;
        let rg = self.parents_require(&[a.0, b.0]);
        Ok(self.push(v, rg, Op::Hadamard(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Node, k: f64) -> Node {
        let v = self.value(a).scale(k);
        let rg = self.slots[a.0].requires_grad;
        self.push(v, rg, Op::Scale(a.0, k))
    }

    pub fn add_scalar(&mut self, a: Node, k: f64) -> Node {
        let v = self.value(a).add_scalar(k);
        let rg = self.slots[a.0].requires_grad;
        self.push(v, rg, Op::AddScalar(a.0))
    }

    pub fn matmul(&mut self, a: Node, b: Node) -> Result<Node> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.parents_require(&[a.0, b.0]);
        Ok(self.push(v, rg, Op::MatMul(a.0, b.0)))
    }

    pub fn transpose(&mut self, a: Node) -> Node {
        let v = self.value(a).transpose();
        let rg = self.slots[a.0].requires_grad;
        self.push(v, rg, Op::Transpose(a.0))
    }

    pub fn sigmoid(&mut self, a: Node) -> Node {
        let mut v = self.value(a).clone();
        for x in v.as_mut_slice() {
            *x = 1.0 / (1.0 + (-*x).exp());
        }
        let rg = self.slots[a.0].requires_grad;
        self.push(v, rg, Op::Sigmoid(a.0))
    }

    /// Row-wise softmax, stabilized by subtracting the row max over visible
    /// entries. Masked entries come out exactly zero. A row with no visible
    /// entry is a degenerate mask.
    pub fn softmax_rows(&mut self, a: Node, mask: Option<&BoolMat>) -> Result<Node> {
        let v = softmax_rows_value(self.value(a), mask)?;
        let rg = self.slots[a.0].requires_grad;
        Ok(self.push(v, rg, Op::SoftmaxRows(a.0)))
    }

    /// Applies the norm-bounding squash to every row independently.
    pub fn squash_rows(&mut self, a: Node) -> Node {
        let v = squash_rows_value(self.value(a));
        let rg = self.slots[a.0].requires_grad;
        self.push(v, rg, Op::SquashRows(a.0))
    }

    pub fn concat_rows(&mut self, a: Node, b: Node) -> Result<Node> {
        let v = self.value(a).concat_rows(self.value(b))?;
        let rg = self.parents_require(&[a.0, b.0]);
        Ok(self.push(v, rg, Op::ConcatRows(a.0, b.0)))
    }

    pub fn slice_rows(&mut self, a: Node, start: usize, end: usize) -> Node {
        let v = self.value(a).slice_rows(start, end);
        let rg = self.slots[a.0].requires_grad;
        self.push(v, rg, Op::SliceRows { parent: a.0, start })
    }

    /// Copies `ids` rows of the external table onto the tape. Backward
    /// accumulates into per-row table gradients instead of a tape node.
    pub fn gather(&mut self, table: &Matrix, ids: &[usize]) -> Result<Node> {
        let mut v = Matrix::zeros(ids.len(), table.cols());
        for (i, &id) in ids.iter().enumerate() {
            if id >= table.rows() {
                return Err(DmanError::InvalidArgument(format!(
                    "gather id {id} out of range for table with {} rows",
                    table.rows()
                )));
            }
            v.row_mut(i).copy_from_slice(table.row(id));
        }
        self.table_width = table.cols();
        Ok(self.push(v, true, Op::Gather(ids.to_vec())))
    }

    /// 1x1 sum of all entries.
    pub fn sum(&mut self, a: Node) -> Node {
        let v = Matrix::from_vec(1, 1, vec![self.value(a).sum()]).unwrap();
        let rg = self.slots[a.0].requires_grad;
        self.push(v, rg, Op::Sum(a.0))
    }

    /// 1x1 squared Frobenius norm.
    pub fn frob_sq(&mut self, a: Node) -> Node {
        let v = Matrix::from_vec(1, 1, vec![self.value(a).frob_sq()]).unwrap();
        let rg = self.slots[a.0].requires_grad;
        self.push(v, rg, Op::FrobSq(a.0))
    }

    /// 1x1 log-sum-exp of a column vector, max-shifted for stability.
    pub fn log_sum_exp(&mut self, a: Node) -> Result<Node> {
        let va = self.value(a);
        if va.cols() != 1 {
            return Err(DmanError::InvalidArgument(format!(
                "log_sum_exp expects a column vector, got {}x{}",
                va.rows(),
                va.cols()
            )));
        }
        let m = va.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = va.as_slice().iter().map(|x| (x - m).exp()).sum();
        let v = Matrix::from_vec(1, 1, vec![m + s.ln()]).unwrap();
        let rg = self.slots[a.0].requires_grad;
        Ok(self.push(v, rg, Op::LogSumExp(a.0)))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar output. Seeds d(out)/d(out) = 1 and
    /// accumulates into every leaf that requires gradients.
    pub fn backward(&mut self, out: Node) -> Result<()> {
        if self.slots[out.0].value.shape() != (1, 1) {
            return Err(DmanError::InvalidArgument(
                "backward requires a 1x1 scalar output".into(),
            ));
        }
        for slot in &mut self.slots {
            let (r, c) = slot.value.shape();
            slot.grad = Matrix::zeros(r, c);
        }
        self.table_grads.clear();
        self.slots[out.0].grad.set(0, 0, 1.0);

        for i in (0..=out.0).rev() {
            if !self.slots[i].requires_grad {
                continue;
            }
            if matches!(self.slots[i].op, Op::Leaf) {
                continue;
            }
            let g = std::mem::replace(&mut self.slots[i].grad, Matrix::zeros(0, 0));
            self.distribute(i, &g);
        }
        Ok(())
    }

    fn add_grad(&mut self, parent: usize, delta: &Matrix) {
        if self.slots[parent].requires_grad {
            self.slots[parent].grad.add_assign(delta);
        }
    }

    fn distribute(&mut self, i: usize, g: &Matrix) {
        match &self.slots[i].op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, g);
                self.add_grad(b, g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, g);
                let neg = g.scale(-1.0);
                self.add_grad(b, &neg);
            }
            Op::Hadamard(a, b) => {
                let (a, b) = (*a, *b);
                let da = g.hadamard(&self.slots[b].value).unwrap();
                let db = g.hadamard(&self.slots[a].value).unwrap();
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::Scale(a, k) => {
                let (a, k) = (*a, *k);
                let da = g.scale(k);
                self.add_grad(a, &da);
            }
            Op::AddScalar(a) => {
                let a = *a;
                self.add_grad(a, g);
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                // dA = G Bᵀ, dB = Aᵀ G
                let da = g.matmul(&self.slots[b].value.transpose()).unwrap();
                let db = self.slots[a].value.transpose().matmul(g).unwrap();
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::Transpose(a) => {
                let a = *a;
                let da = g.transpose();
                self.add_grad(a, &da);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let y = &self.slots[i].value;
                let mut da = g.clone();
                for (d, yv) in da.as_mut_slice().iter_mut().zip(y.as_slice()) {
                    *d *= yv * (1.0 - yv);
                }
                self.add_grad(a, &da);
            }
            Op::SoftmaxRows(a) => {
                let a = *a;
                let y = &self.slots[i].value;
                let mut da = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    for c in 0..y.cols() {
                        da.set(r, c, yr[c] * (gr[c] - dot));
                    }
                }
                self.add_grad(a, &da);
            }
            Op::SquashRows(a) => {
                let a = *a;
                let da = squash_rows_backward(&self.slots[a].value, g);
                self.add_grad(a, &da);
            }
            Op::ConcatRows(a, b) => {
                let (a, b) = (*a, *b);
                let ra = self.slots[a].value.rows();
                let da = g.slice_rows(0, ra);
                let db = g.slice_rows(ra, g.rows());
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::SliceRows { parent, start } => {
                let (parent, start) = (*parent, *start);
                if self.slots[parent].requires_grad {
                    let cols = g.cols();
                    for r in 0..g.rows() {
                        let dst = self.slots[parent].grad.row_mut(start + r);
                        for c in 0..cols {
                            dst[c] += g.get(r, c);
                        }
                    }
                }
            }
            Op::Gather(ids) => {
                let ids = ids.clone();
                let w = self.table_width;
                for (r, id) in ids.into_iter().enumerate() {
                    let entry = self.table_grads.entry(id).or_insert_with(|| vec![0.0; w]);
                    for (e, gv) in entry.iter_mut().zip(g.row(r)) {
                        *e += gv;
                    }
                }
            }
            Op::Sum(a) => {
                let a = *a;
                let s = g.get(0, 0);
                if self.slots[a].requires_grad {
                    for x in self.slots[a].grad.as_mut_slice() {
                        *x += s;
                    }
                }
            }
            Op::FrobSq(a) => {
                let a = *a;
                let da = self.slots[a].value.scale(2.0 * g.get(0, 0));
                self.add_grad(a, &da);
            }
            Op::LogSumExp(a) => {
                let a = *a;
                let va = &self.slots[a].value;
                let m = va.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = va.as_slice().iter().map(|x| (x - m).exp()).collect();
                let total: f64 = exps.iter().sum();
                let s = g.get(0, 0);
                let da =
                    Matrix::from_vec(va.rows(), 1, exps.iter().map(|e| s * e / total).collect())
                        .unwrap();
                self.add_grad(a, &da);
            }
        }
    }

    /// Sparse gradients for the external table accumulated by the latest
    /// backward sweep, keyed by row id.
    pub fn take_table_grads(&mut self) -> HashMap<usize, Vec<f64>> {
        std::mem::take(&mut self.table_grads)
    }
}

pub(crate) fn softmax_rows_value(logits: &Matrix, mask: Option<&BoolMat>) -> Result<Matrix> {
    if let Some(m) = mask {
        if m.shape() != logits.shape() {
            return Err(DmanError::Shape {
                op: "softmax_rows mask",
                left_rows: logits.rows(),
                left_cols: logits.cols(),
                right_rows: m.rows(),
                right_cols: m.cols(),
            });
        }
    }
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let visible = |c: usize| mask.map_or(true, |m| m.get(r, c));
        let mut max = f64::NEG_INFINITY;
        for (c, &x) in row.iter().enumerate() {
            if visible(c) && x > max {
                max = x;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(DmanError::DegenerateMask { row: r });
        }
        let mut sum = 0.0;
        for (c, &x) in row.iter().enumerate() {
            if visible(c) {
                let e = (x - max).exp();
                out.set(r, c, e);
                sum += e;
            }
        }
        for c in 0..logits.cols() {
            if visible(c) {
                out.set(r, c, out.get(r, c) / sum);
            }
        }
    }
    Ok(out)
}

pub(crate) fn squash_rows_value(s: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(s.rows(), s.cols());
    for r in 0..s.rows() {
        let row = s.row(r);
        let norm_sq: f64 = row.iter().map(|x| x * x).sum();
        let norm = norm_sq.sqrt();
        let factor = norm_sq / (1.0 + norm_sq) / (norm + SQUASH_EPS);
        for (c, &x) in row.iter().enumerate() {
            out.set(r, c, factor * x);
        }
    }
    out
}

fn squash_rows_backward(s: &Matrix, g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(s.rows(), s.cols());
    for ri in 0..s.rows() {
        let row = s.row(ri);
        let grow = g.row(ri);
        let norm_sq: f64 = row.iter().map(|x| x * x).sum();
        let r = norm_sq.sqrt();
        if r == 0.0 {
            // squash has zero derivative at the origin under the epsilon rule
            continue;
        }
        let a = 1.0 + norm_sq;
        let b = r + SQUASH_EPS;
        let h = norm_sq / (a * b);
        // dh/dr for h = r² / ((1+r²)(r+ε))
        let dh = (2.0 * r * a * b - norm_sq * (2.0 * r * b + a)) / (a * a * b * b);
        let s_dot_g: f64 = row.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
        let coef = dh / r * s_dot_g;
        for c in 0..s.cols() {
            out.set(ri, c, h * grow[c] + coef * row[c]);
        }
    }
    out
}
