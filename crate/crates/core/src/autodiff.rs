//! A small reverse-mode automatic differentiation tape over dense matrices.
//!
//! Every operation appends a node to a [`Tape`]; nodes are only ever appended,
//! so node order is already a topological order and [`Tape::backward`] is a
//! single reverse sweep. A tape is meant to live for one forward pass and one
//! backward pass, then be dropped (or [`Tape::clear`]ed).
//!
//! ```
//! use dkm::autodiff::Tape;
//! use dkm::matrix::DMatrix;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(DMatrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap());
//! let sq = tape.square(x);
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().as_slice(), &[2.0, 4.0]);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{DkmError, Result};
use crate::matrix::{Matrix, Scalar};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a node on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Square(Var),
    Sqrt(Var),
    ScalarMul(Var, T),
    Relu(Var),
    Transpose(Var),
    SumRows(Var),
    SumCols(Var),
    Sum(Var),
    BroadcastRow(Var),
    BroadcastCol(Var),
    RowSoftmax(Var, T),
    PairwiseSqDist(Var, Var),
    SelectRows { mask: Vec<bool>, on_true: Var, on_false: Var },
    ReshapePadded(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Matrix<T> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations for one forward/backward pass.
#[derive(Debug)]
pub struct Tape<T: Scalar = f64> {
    id: u64,
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`, if `var` contributed to it.
    pub fn get(&self, var: Var) -> Option<&Matrix<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.index).and_then(Option::take)
    }
}

fn shape_err<T: Scalar>(op: &str, a: &Matrix<T>, b: &Matrix<T>) -> DkmError {
    DkmError::Dimension(format!("{op}: {}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all nodes so the tape can record a fresh pass.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn node(&self, v: Var) -> &Node<T> {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.index]
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn push_op(&mut self, value: Matrix<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.node(p).needs_grad);
        self.push(value, op, needs_grad)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(value, Op::MatMul(a, b), &[a, b]))
    }

    fn elementwise(&mut self, a: Var, b: Var, name: &str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va, vb));
        }
        let value = va.zip_map(vb, f)?;
        Ok(self.push_op(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push_op(value, Op::Square(x), &[x])
    }

    /// Elementwise square root. The derivative at 0 is taken to be 0.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()).sqrt());
        self.push_op(value, Op::Sqrt(x), &[x])
    }

    pub fn scalar_mul(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push_op(value, Op::ScalarMul(x, s), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scalar_mul(x, -T::one())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push_op(value, Op::Relu(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push_op(value, Op::Transpose(x), &[x])
    }

    /// Sum of each row: `r x c -> r x 1`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Matrix::from_fn(v.rows(), 1, |i, _| v.row(i).iter().fold(T::zero(), |a, &b| a + b));
        self.push_op(value, Op::SumRows(x), &[x])
    }

    /// Sum of each column: `r x c -> 1 x c`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut value = Matrix::zeros(1, v.cols());
        for row in v.row_iter() {
            for (o, &r) in value.as_mut_slice().iter_mut().zip(row) {
                *o = *o + r;
            }
        }
        self.push_op(value, Op::SumCols(x), &[x])
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).sum());
        self.push_op(value, Op::Sum(x), &[x])
    }

    /// Repeats a `1 x c` row `rows` times.
    pub fn broadcast_row(&mut self, x: Var, rows: usize) -> Result<Var> {
        let v = self.value(x);
        if v.rows() != 1 {
            return Err(DkmError::Dimension(format!("broadcast_row: expected 1 row, got {}", v.rows())));
        }
        let value = Matrix::from_fn(rows, v.cols(), |_, j| v.get(0, j));
        Ok(self.push_op(value, Op::BroadcastRow(x), &[x]))
    }

    /// Repeats an `r x 1` column `cols` times.
    pub fn broadcast_col(&mut self, x: Var, cols: usize) -> Result<Var> {
        let v = self.value(x);
        if v.cols() != 1 {
            return Err(DkmError::Dimension(format!("broadcast_col: expected 1 column, got {}", v.cols())));
        }
        let value = Matrix::from_fn(v.rows(), cols, |i, _| v.get(i, 0));
        Ok(self.push_op(value, Op::BroadcastCol(x), &[x]))
    }

    /// Row-wise softmax of `x / temperature`, computed after subtracting each row's maximum.
    pub fn row_softmax(&mut self, x: Var, temperature: T) -> Result<Var> {
        if !(temperature > T::zero()) || !temperature.is_finite() {
            return Err(DkmError::Parameter(format!("softmax temperature must be positive, got {temperature}")));
        }
        let value = softmax_rows(self.value(x), temperature);
        Ok(self.push_op(value, Op::RowSoftmax(x, temperature), &[x]))
    }

    /// `out[i][j] = ||a_i - b_j||^2` for row sets `a` (n x d) and `b` (k x d).
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(shape_err("pairwise_sq_dist", va, vb));
        }
        let value = Matrix::from_fn(va.rows(), vb.rows(), |i, j| {
            va.row(i).iter().zip(vb.row(j)).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
        });
        Ok(self.push_op(value, Op::PairwiseSqDist(a, b), &[a, b]))
    }

    /// Row `i` comes from `on_true` where `mask[i]`, otherwise from `on_false`.
    pub fn select_rows(&mut self, mask: Vec<bool>, on_true: Var, on_false: Var) -> Result<Var> {
        let (vt, vf) = (self.value(on_true), self.value(on_false));
        if vt.shape() != vf.shape() || mask.len() != vt.rows() {
            return Err(shape_err("select_rows", vt, vf));
        }
        let value = Matrix::from_fn(vt.rows(), vt.cols(), |i, j| if mask[i] { vt.get(i, j) } else { vf.get(i, j) });
        Ok(self.push_op(value, Op::SelectRows { mask, on_true, on_false }, &[on_true, on_false]))
    }

    /// Reinterprets the row-major data of `x` as `rows x cols`, truncating or
    /// zero-padding the tail as needed.
    pub fn reshape_padded(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(x).as_slice();
        let mut data = vec![T::zero(); rows * cols];
        let n = src.len().min(data.len());
        data[..n].copy_from_slice(&src[..n]);
        let value = Matrix::from_vec(rows, cols, data).expect("length matches by construction");
        self.push_op(value, Op::ReshapePadded(x), &[x])
    }

    /// Mean cross-entropy of row-wise softmax(`logits`) against class `labels`, as a 1x1 node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        if labels.len() != v.rows() || v.rows() == 0 {
            return Err(DkmError::Dimension(format!(
                "softmax_cross_entropy: {} rows vs {} labels",
                v.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= v.cols()) {
            return Err(DkmError::Parameter(format!("label {bad} out of range for {} classes", v.cols())));
        }
        let probs = softmax_rows(v, T::one());
        let mut loss = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = v.row(i);
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().fold(T::zero(), |acc, &x| acc + (x - max).exp()).ln() + max;
            loss = loss + lse - row[label];
        }
        let n = T::of(labels.len() as f64);
        let value = Matrix::scalar(loss / n);
        Ok(self.push_op(value, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    /// Back-propagates from a 1x1 `loss` node. A tape supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if loss.tape != self.id {
            return Err(DkmError::Contract("loss belongs to a different tape".into()));
        }
        if self.backward_done {
            return Err(DkmError::Contract("backward already ran on this tape; clear it first".into()));
        }
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(DkmError::Contract(format!("loss must be 1x1, got {}x{}", shape.0, shape.1)));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Matrix<T>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(Matrix::ones(1, 1));
        for idx in (0..=loss.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        // only report gradients for nodes that actually depend on a leaf
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
        if !self.nodes[v.index].needs_grad {
            return;
        }
        match &mut grads[v.index] {
            Some(existing) => {
                for (e, x) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *e = *e + *x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op<T>, out: &Matrix<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let val = |v: Var| &self.nodes[v.index].value;
        let mm = |a: &Matrix<T>, b: &Matrix<T>| a.matmul(b).expect("shapes validated in forward");
        match *op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                self.accumulate(grads, a, mm(g, &val(b).transpose()));
                self.accumulate(grads, b, mm(&val(a).transpose(), g));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, a, g.zip_map(val(b), |x, y| x * y).unwrap());
                self.accumulate(grads, b, g.zip_map(val(a), |x, y| x * y).unwrap());
            }
            Op::Div(a, b) => {
                let vb = val(b);
                self.accumulate(grads, a, g.zip_map(vb, |x, y| x / y).unwrap());
                // d(a/b)/db = -(a/b)/b
                let gb = g.zip_map(out, |x, q| x * q).unwrap().zip_map(vb, |x, y| -x / y).unwrap();
                self.accumulate(grads, b, gb);
            }
            Op::Square(x) => {
                let two = T::of(2.0);
                self.accumulate(grads, x, g.zip_map(val(x), |gi, xi| two * xi * gi).unwrap());
            }
            Op::Sqrt(x) => {
                let half = T::of(0.5);
                let gx = g.zip_map(out, |gi, yi| if yi > T::zero() { gi * half / yi } else { T::zero() }).unwrap();
                self.accumulate(grads, x, gx);
            }
            Op::ScalarMul(x, s) => self.accumulate(grads, x, g.map(|v| v * s)),
            Op::Relu(x) => {
                let gx = g.zip_map(val(x), |gi, xi| if xi > T::zero() { gi } else { T::zero() }).unwrap();
                self.accumulate(grads, x, gx);
            }
            Op::Transpose(x) => self.accumulate(grads, x, g.transpose()),
            Op::SumRows(x) => {
                let (r, c) = val(x).shape();
                self.accumulate(grads, x, Matrix::from_fn(r, c, |i, _| g.get(i, 0)));
            }
            Op::SumCols(x) => {
                let (r, c) = val(x).shape();
                self.accumulate(grads, x, Matrix::from_fn(r, c, |_, j| g.get(0, j)));
            }
            Op::Sum(x) => {
                let (r, c) = val(x).shape();
                self.accumulate(grads, x, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::BroadcastRow(x) => {
                let mut gx = Matrix::zeros(1, g.cols());
                for row in g.row_iter() {
                    for (o, &v) in gx.as_mut_slice().iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                self.accumulate(grads, x, gx);
            }
            Op::BroadcastCol(x) => {
                let gx = Matrix::from_fn(g.rows(), 1, |i, _| g.row(i).iter().fold(T::zero(), |a, &b| a + b));
                self.accumulate(grads, x, gx);
            }
            Op::RowSoftmax(x, tau) => {
                // dx = (1/tau) * y * (g - <g, y>) per row
                let mut gx = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let (y, gi) = (out.row(i), g.row(i));
                    let dot = y.iter().zip(gi).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    for (o, (&yj, &gj)) in gx.row_mut(i).iter_mut().zip(y.iter().zip(gi)) {
                        *o = yj * (gj - dot) / tau;
                    }
                }
                self.accumulate(grads, x, gx);
            }
            Op::PairwiseSqDist(a, b) => {
                let (va, vb) = (val(a), val(b));
                let two = T::of(2.0);
                let mut ga = Matrix::zeros(va.rows(), va.cols());
                let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                for i in 0..va.rows() {
                    for j in 0..vb.rows() {
                        let gij = g.get(i, j);
                        if gij == T::zero() {
                            continue;
                        }
                        for t in 0..va.cols() {
                            let diff = two * gij * (va.get(i, t) - vb.get(j, t));
                            ga.set(i, t, ga.get(i, t) + diff);
                            gb.set(j, t, gb.get(j, t) - diff);
                        }
                    }
                }
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            Op::SelectRows { ref mask, on_true, on_false } => {
                let (r, c) = g.shape();
                let pick =
                    |keep: bool| Matrix::from_fn(r, c, |i, j| if mask[i] == keep { g.get(i, j) } else { T::zero() });
                self.accumulate(grads, on_true, pick(true));
                self.accumulate(grads, on_false, pick(false));
            }
            Op::ReshapePadded(x) => {
                let (r, c) = val(x).shape();
                let mut data = vec![T::zero(); r * c];
                let n = data.len().min(g.len());
                data[..n].copy_from_slice(&g.as_slice()[..n]);
                self.accumulate(grads, x, Matrix::from_vec(r, c, data).unwrap());
            }
            Op::SoftmaxCrossEntropy { logits, ref labels, ref probs } => {
                let scale = g.get(0, 0) / T::of(labels.len() as f64);
                let mut gx = probs.map(|p| p * scale);
                for (i, &l) in labels.iter().enumerate() {
                    gx.set(i, l, gx.get(i, l) - scale);
                }
                self.accumulate(grads, logits, gx);
            }
        }
    }
}

/// Row-wise softmax of `x / temperature` with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Matrix<T>, temperature: T) -> Matrix<T> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = ((*v - max) / temperature).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::DMatrix;

    fn m(rows: usize, cols: usize, data: &[f64]) -> DMatrix {
        DMatrix::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(DMatrix::identity(2));
        let x = tape.leaf(m(2, 2, &[1.0, -2.0, 3.5, 4.0]));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn matmul_hand_values_and_shape_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(m(2, 1, &[1.0, 1.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[3.0, 7.0]);
        assert!(matches!(tape.matmul(b, b), Err(DkmError::Dimension(_))));
    }

    #[test]
    fn softmax_symmetric_and_hard_limit() {
        let mut tape = Tape::new();
        let x = tape.leaf(m(1, 2, &[0.0, 0.0]));
        let y = tape.row_softmax(x, 1.0).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[0.5, 0.5]);

        let x = tape.leaf(m(1, 2, &[-1.0, -4.0]));
        let y = tape.row_softmax(x, 1e-3).unwrap();
        let v = tape.value(y);
        assert_eq!(v.row_argmax(0), 0);
        assert!(v.get(0, 0) >= 1.0 - 1e-6);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let mut tape = Tape::new();
        let x = tape.leaf(m(1, 2, &[0.0, 1.0]));
        assert!(matches!(tape.row_softmax(x, 0.0), Err(DkmError::Parameter(_))));
        assert!(matches!(tape.row_softmax(x, -1.0), Err(DkmError::Parameter(_))));
    }

    #[test]
    fn softmax_extreme_temperature_stays_finite() {
        let mut tape = Tape::new();
        let x = tape.leaf(m(1, 3, &[-0.5, -0.2, -3.0]));
        let y = tape.row_softmax(x, 8e-6).unwrap();
        assert!(tape.value(y).all_finite());
        assert_eq!(tape.value(y).as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(m(1, 2, &[2.0, -3.0]));
        let s = tape.square(x);
        assert_eq!(tape.value(s).as_slice(), &[4.0, 9.0]);
        let ones = tape.leaf(DMatrix::ones(2, 3));
        let r = tape.sum_rows(ones);
        assert_eq!(tape.value(r).as_slice(), &[3.0, 3.0]);
        let c = tape.sum_cols(ones);
        assert_eq!(tape.value(c).as_slice(), &[2.0, 2.0, 2.0]);
        assert!(tape.add(x, ones).is_err());
        assert!(tape.broadcast_row(ones, 4).is_err());
        assert!(tape.broadcast_col(ones, 4).is_err());
    }

    #[test]
    fn backward_simple_losses() {
        let mut tape = Tape::new();
        let x = tape.leaf(m(2, 3, &[0.1, 2.0, -1.0, 4.0, 0.0, 3.0]));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &DMatrix::ones(2, 3));

        let mut tape = Tape::new();
        let x = tape.leaf(m(1, 2, &[1.0, 2.0]));
        let sq = tape.square(x);
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(m(1, 2, &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(DkmError::Contract(_))));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(DkmError::Contract(_))));
        tape.clear();
        let x = tape.leaf(m(1, 1, &[3.0]));
        assert!(tape.backward(x).is_ok());
    }

    #[test]
    fn reused_node_accumulates_both_paths() {
        let mut tape = Tape::new();
        let x = tape.leaf(m(1, 2, &[1.5, -2.0]));
        // loss = sum(x * x + x): the x node is consumed three times
        let xx = tape.mul(x, x).unwrap();
        let y = tape.add(xx, x).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().as_slice(), &[4.0, -3.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(m(1, 2, &[1.0, 2.0]));
        let x = tape.leaf(m(1, 2, &[3.0, 4.0]));
        let y = tape.mul(c, x).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn reshape_padded_round_trip() {
        let mut tape = Tape::new();
        let x = tape.leaf(m(1, 3, &[1.0, 2.0, 3.0]));
        let y = tape.reshape_padded(x, 2, 2);
        assert_eq!(tape.value(y).as_slice(), &[1.0, 2.0, 3.0, 0.0]);
        let w = tape.constant(m(2, 2, &[1.0, 1.0, 1.0, 5.0]));
        let p = tape.mul(y, w).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn f32_tape_softmax_rows_sum_to_one() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(Matrix::from_vec(2, 3, vec![0.3f32, -1.0, 7.0, 100.0, 99.0, -50.0]).unwrap());
        let y = tape.row_softmax(x, 0.7).unwrap();
        for row in tape.value(y).row_iter() {
            assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }
}
