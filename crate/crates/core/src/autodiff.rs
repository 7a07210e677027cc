//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Nodes are appended to a [`Tape`] as operations run, so insertion order is
//! already a topological order. [`Tape::backward`] walks the nodes once in
//! reverse and accumulates gradients into a [`Gradients`] table.
//!
//! Leaves come in two kinds: parameters ([`Tape::param`]) receive gradients,
//! constants ([`Tape::constant`]) do not. A node requires a gradient when any
//! of its parents does; nodes that do not are skipped during the backward
//! sweep and report a zero gradient.
//!
//! ```
//! use mslora::autodiff::Tape;
//! use mslora::Matrix;
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Matrix::from_rows(&[&[1.0, 2.0]]));
//! let h = tape.constant(Matrix::from_rows(&[&[3.0], &[4.0]]));
//! let e = tape.matmul(w, h).unwrap();
//! let loss = tape.sum(e);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).as_slice(), &[3.0, 4.0]);
//! ```

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Reference to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Transpose(Var),
    /// `x` (r x c) plus a column vector (r x 1) added to every column.
    AddColumn(Var, Var),
    /// `x` (r x c) plus a row vector (1 x c) added to every row.
    AddRow(Var, Var),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
    },
    FrobeniusSq(Var),
    MeanAbsDiff(Var, Var),
    ExpNeg(Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match *self {
            Op::Param | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddColumn(a, b)
            | Op::AddRow(a, b)
            | Op::MeanAbsDiff(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::FrobeniusSq(a)
            | Op::ExpNeg(a) => vec![a],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
        }
    }
}

struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// Append-only record of a computation.
///
/// Single-use: build, call [`Tape::backward`] on a scalar root, read gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        let requires_grad = match op {
            Op::Param => true,
            Op::Constant => false,
            _ => op.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(Op::Param, value)
    }

    /// Non-trainable leaf; never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(Op::Scale(a, s), value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), value)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value)
    }

    pub fn add_column(&mut self, x: Var, column: Var) -> Result<Var> {
        let (xm, cm) = (self.value(x), self.value(column));
        if cm.cols() != 1 || cm.rows() != xm.rows() {
            return Err(Error::shape("add_column", xm.shape(), cm.shape()));
        }
        let value = Matrix::from_fn(xm.rows(), xm.cols(), |i, j| xm.get(i, j) + cm.get(i, 0));
        Ok(self.push(Op::AddColumn(x, column), value))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xm, rm) = (self.value(x), self.value(row));
        if rm.rows() != 1 || rm.cols() != xm.cols() {
            return Err(Error::shape("add_row", xm.shape(), rm.shape()));
        }
        let value = Matrix::from_fn(xm.rows(), xm.cols(), |i, j| xm.get(i, j) + rm.get(0, j));
        Ok(self.push(Op::AddRow(x, row), value))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lm = self.value(logits);
        let (n, c) = lm.shape();
        if labels.len() != n {
            return Err(Error::LabelCount {
                expected: n,
                got: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let mut probs = Matrix::zeros(n, c);
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = lm.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            let log_denom = denom.ln();
            for (j, &z) in row.iter().enumerate() {
                probs.set(i, j, (z - max).exp() / denom);
            }
            total += log_denom - (row[label] - max);
        }
        let value = Matrix::scalar(total / n as f64);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            value,
        ))
    }

    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).frobenius_sq());
        self.push(Op::FrobeniusSq(a), value)
    }

    /// `sum |a - b| / (rows * cols)`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.shape() != bm.shape() {
            return Err(Error::shape("mean_abs_diff", am.shape(), bm.shape()));
        }
        let total: f64 = am
            .as_slice()
            .iter()
            .zip(bm.as_slice())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let value = Matrix::scalar(total / am.len() as f64);
        Ok(self.push(Op::MeanAbsDiff(a, b), value))
    }

    /// Elementwise `exp(-x)`.
    pub fn exp_neg(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| (-x).exp());
        self.push(Op::ExpNeg(a), value)
    }

    /// Shorthand for a scalar constant node.
    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Matrix::scalar(value))
    }

    /// Reverse sweep from a 1x1 root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let (rows, cols) = self.shape(root);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarRoot { rows, cols });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Matrix::scalar(1.0));
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut send = |v: Var, contribution: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc
                    .add_assign(&contribution)
                    .expect("gradient shape matches node shape"),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Param | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    send(*a, g.matmul(&bv.transpose()).expect("matmul backward"));
                }
                if self.requires_grad(*b) {
                    send(*b, av.transpose().matmul(g).expect("matmul backward"));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Scale(a, s) => send(*a, g.scale(*s)),
            Op::Relu(a) => {
                let x = self.value(*a);
                let gated = g
                    .zip_with(x, "relu", |gi, xi| if xi > 0.0 { gi } else { 0.0 })
                    .expect("relu backward");
                send(*a, gated);
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::AddColumn(x, c) => {
                send(*x, g.clone());
                if self.requires_grad(*c) {
                    let col = Matrix::from_fn(g.rows(), 1, |i, _| g.row(i).iter().sum());
                    send(*c, col);
                }
            }
            Op::AddRow(x, r) => {
                send(*x, g.clone());
                if self.requires_grad(*r) {
                    let row = Matrix::from_fn(1, g.cols(), |_, j| {
                        (0..g.rows()).map(|i| g.get(i, j)).sum()
                    });
                    send(*r, row);
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                send(*a, Matrix::filled(r, c, g.item()));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len() as f64;
                let scale = g.item() / n;
                let mut d = probs.clone();
                for (i, &label) in labels.iter().enumerate() {
                    d.set(i, label, d.get(i, label) - 1.0);
                }
                send(*logits, d.scale(scale));
            }
            Op::FrobeniusSq(a) => send(*a, self.value(*a).scale(2.0 * g.item())),
            Op::MeanAbsDiff(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = g.item() / av.len() as f64;
                let da = av
                    .zip_with(bv, "mean_abs_diff", |x, y| sign(x - y) * k)
                    .expect("mean_abs_diff backward");
                if self.requires_grad(*b) {
                    send(*b, da.scale(-1.0));
                }
                send(*a, da);
            }
            Op::ExpNeg(a) => {
                let d = g
                    .zip_with(&node.value, "exp_neg", |gi, yi| -gi * yi)
                    .expect("exp_neg backward");
                send(*a, d);
            }
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient table produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zero when `v` did not reach the root.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn try_get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(xs: &[f64]) -> Matrix {
        Matrix::from_rows(&[xs])
    }

    #[test]
    fn add_values_and_identity() {
        let mut t = Tape::new();
        let a = t.constant(row(&[1.0, 2.0]));
        let b = t.constant(row(&[3.0, 4.0]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c), &row(&[4.0, 6.0]));
        let z = t.constant(Matrix::zeros(1, 2));
        let d = t.add(a, z).unwrap();
        assert_eq!(t.value(d), t.value(a));
    }

    #[test]
    fn add_passes_gradient_unchanged() {
        let mut t = Tape::new();
        let a = t.param(row(&[1.0, 2.0]));
        let b = t.param(row(&[3.0, 4.0]));
        let c = t.add(a, b).unwrap();
        let w = t.constant(Matrix::from_rows(&[&[0.5], &[-2.0]]));
        let y = t.matmul(c, w).unwrap();
        let g = t.backward(y).unwrap();
        let expected = row(&[0.5, -2.0]);
        assert!(g.get(a).bitwise_eq(&expected));
        assert!(g.get(b).bitwise_eq(&expected));
    }

    #[test]
    fn add_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(1, 2));
        let b = t.constant(Matrix::zeros(2, 1));
        assert!(matches!(t.add(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(t.matmul(a, a), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(
            t.mean_abs_diff(a, b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn scale_cases() {
        let mut t = Tape::new();
        let x = t.constant(row(&[2.0, 4.0]));
        let z = t.scale(x, 0.0);
        let one = t.scale(x, 1.0);
        let half = t.scale(x, 0.5);
        assert_eq!(t.value(z), &Matrix::zeros(1, 2));
        assert_eq!(t.value(one), t.value(x));
        assert_eq!(t.value(half), &row(&[1.0, 2.0]));
    }

    #[test]
    fn relu_values_and_idempotence() {
        let mut t = Tape::new();
        let x = t.constant(row(&[-1.0, 2.0]));
        let r = t.relu(x);
        assert_eq!(t.value(r), &row(&[0.0, 2.0]));
        let rr = t.relu(r);
        assert_eq!(t.value(rr), t.value(r));
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.param(row(&[0.0, 1.0]));
        let r = t.relu(x);
        let s = t.sum(r);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x), row(&[0.0, 1.0]));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut t = Tape::new();
        let z = t.constant(Matrix::zeros(3, 2));
        let l = t.softmax_cross_entropy(z, &[0, 1, 0]).unwrap();
        assert!((t.value(l).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_saturated() {
        let mut t = Tape::new();
        let z = t.constant(row(&[10.0, -10.0]));
        let l = t.softmax_cross_entropy(z, &[0]).unwrap();
        assert!(t.value(l).item() < 1e-8);
    }

    #[test]
    fn cross_entropy_label_errors() {
        let mut t = Tape::new();
        let z = t.constant(Matrix::zeros(2, 3));
        assert!(matches!(
            t.softmax_cross_entropy(z, &[0, 3]),
            Err(Error::LabelOutOfRange {
                label: 3,
                classes: 3
            })
        ));
        assert!(matches!(
            t.softmax_cross_entropy(z, &[0]),
            Err(Error::LabelCount { .. })
        ));
    }

    #[test]
    fn cross_entropy_extreme_logits_stay_finite() {
        let mut t = Tape::new();
        let z = t.param(row(&[1000.0, -1000.0, 0.0]));
        let l = t.softmax_cross_entropy(z, &[1]).unwrap();
        assert!(t.value(l).item().is_finite());
        assert!(t.backward(l).unwrap().get(z).is_finite());
    }

    #[test]
    fn frobenius_values() {
        let mut t = Tape::new();
        let z = t.constant(Matrix::zeros(2, 2));
        let v = t.constant(row(&[3.0, 4.0]));
        let fz = t.frobenius_sq(z);
        let fv = t.frobenius_sq(v);
        assert_eq!(t.value(fz).item(), 0.0);
        assert_eq!(t.value(fv).item(), 25.0);
    }

    #[test]
    fn mean_abs_diff_values() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = t.constant(Matrix::from_rows(&[&[2.0, 2.0], &[3.0, 2.0]]));
        let ab = t.mean_abs_diff(a, b).unwrap();
        let ba = t.mean_abs_diff(b, a).unwrap();
        let aa = t.mean_abs_diff(a, a).unwrap();
        // Elementwise loop oracle.
        let oracle: f64 = t
            .value(a)
            .as_slice()
            .iter()
            .zip(t.value(b).as_slice())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / 4.0;
        assert_eq!(oracle, 0.75);
        assert_eq!(t.value(ab).item(), 0.75);
        assert_eq!(t.value(ab).item(), t.value(ba).item());
        assert_eq!(t.value(aa).item(), 0.0);
    }

    #[test]
    fn mean_abs_diff_sign_zero_subgradient() {
        let mut t = Tape::new();
        let a = t.param(row(&[1.0, 2.0]));
        let b = t.constant(row(&[1.0, 0.0]));
        let d = t.mean_abs_diff(a, b).unwrap();
        let g = t.backward(d).unwrap();
        assert_eq!(g.get(a), row(&[0.0, 0.5]));
    }

    #[test]
    fn exp_neg_values_and_derivative() {
        let mut t = Tape::new();
        let x0 = t.param(Matrix::scalar(0.0));
        let x1 = t.constant(Matrix::scalar(1.0));
        let y0 = t.exp_neg(x0);
        let y1 = t.exp_neg(x1);
        assert_eq!(t.value(y0).item(), 1.0);
        assert!((t.value(y1).item() - 0.367879441171442).abs() < 1e-15);
        let g = t.backward(y0).unwrap();
        assert!((g.get(x0).item() + 1.0).abs() < 1e-9);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let a = t.param(Matrix::zeros(2, 2));
        assert!(matches!(
            t.backward(a),
            Err(Error::NonScalarRoot { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn unused_node_has_zero_gradient() {
        let mut t = Tape::new();
        let a = t.param(row(&[1.0, 2.0]));
        let unused = t.param(Matrix::filled(2, 3, 5.0));
        let s = t.sum(a);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(unused), Matrix::zeros(2, 3));
        assert!(g.try_get(unused).is_none());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.param(row(&[1.0, 2.0]));
        let c = t.constant(row(&[3.0, -1.0]));
        let d = t.mean_abs_diff(a, c).unwrap();
        let g = t.backward(d).unwrap();
        assert!(g.try_get(c).is_none());
        assert!(g.try_get(a).is_some());
    }

    #[test]
    fn gradient_of_sum_wh_is_outer_product() {
        // d/dW sum(W h) = 1 h^T
        let mut t = Tape::new();
        let w = t.param(Matrix::from_rows(&[&[0.3, -0.2, 0.1], &[0.5, 0.0, -0.7]]));
        let h = t.constant(Matrix::from_rows(&[&[1.0], &[-2.0], &[0.5]]));
        let e = t.matmul(w, h).unwrap();
        let s = t.sum(e);
        let g = t.backward(s).unwrap();
        let expected = Matrix::filled(2, 1, 1.0)
            .matmul(&t.value(h).transpose())
            .unwrap();
        assert_eq!(g.get(w), expected);
    }

    #[test]
    fn fan_out_gradients_add() {
        // y = sum(x*W1) + sum(x*W2), x used twice.
        let build = |w1: f64, w2: f64, uses: (bool, bool)| {
            let mut t = Tape::new();
            let x = t.param(row(&[1.0, -2.0]));
            let a = t.constant(Matrix::filled(2, 1, w1));
            let b = t.constant(Matrix::filled(2, 1, w2));
            let mut terms = vec![];
            if uses.0 {
                terms.push(t.matmul(x, a).unwrap());
            }
            if uses.1 {
                terms.push(t.matmul(x, b).unwrap());
            }
            let mut acc = terms[0];
            for &term in &terms[1..] {
                acc = t.add(acc, term).unwrap();
            }
            let s = t.sum(acc);
            t.backward(s).unwrap().get(x)
        };
        let both = build(0.5, 3.0, (true, true));
        let first = build(0.5, 3.0, (true, false));
        let second = build(0.5, 3.0, (false, true));
        assert_eq!(both, first.add(&second).unwrap());
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let a = t.param(Matrix::from_rows(&[&[0.1, 0.2], &[0.3, -0.4]]));
            let b = t.relu(a);
            let c = t.matmul(b, a).unwrap();
            let f = t.frobenius_sq(c);
            t.backward(f).unwrap().get(a)
        };
        assert!(run().bitwise_eq(&run()));
    }
}
