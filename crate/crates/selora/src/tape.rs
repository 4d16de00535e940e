//! Reverse-mode differentiation over dense matrices.
//!
//! A `Tape` records one forward pass as a sequence of primitive operations.
//! `backward` replays it in reverse and returns the gradient of a scalar node
//! with respect to every recorded value that requires gradients. Tapes are
//! cheap, single-use per forward pass, and never own the model's parameters;
//! leaves snapshot the values they are given, so parameter structs stay
//! untouched until the caller routes gradients back into them.

use crate::error::{Error, Result};
use crate::matrix::Matrix2D;

/// Handle to a value recorded on a tape. Only valid for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `(x: m x n, bias: 1 x n)`, bias added to every row.
    AddRowBroadcast(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    /// Mean over entries of the squared difference; scalar output.
    MseLoss(Var, Var),
    /// Mean of several scalar nodes; scalar output.
    MeanScalars(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Matrix2D,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar node with respect to tape values, indexed by `Var`.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix2D>>,
}

impl Gradients {
    /// Gradient for `v`, if `v` required gradients and was reachable from the
    /// loss. Unreachable trainable leaves yield `None`, which callers treat
    /// as zero.
    pub fn get(&self, v: Var) -> Option<&Matrix2D> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a recorded node.
    pub fn value(&self, v: Var) -> &Matrix2D {
        &self.nodes[v.0].value
    }

    /// Value of a scalar (1x1) node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar_value on non-scalar node");
        m.get(0, 0)
    }

    fn push(&mut self, value: Matrix2D, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a leaf holding a snapshot of `value`.
    pub fn leaf(&mut self, value: Matrix2D, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Add a `1 x n` bias row to every row of an `m x n` value.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xm, bm) = (self.value(x), self.value(bias));
        if bm.rows() != 1 || bm.cols() != xm.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                left_rows: xm.rows(),
                left_cols: xm.cols(),
                right_rows: bm.rows(),
                right_cols: bm.cols(),
            });
        }
        let mut value = xm.clone();
        for i in 0..value.rows() {
            for j in 0..value.cols() {
                let v = value.get(i, j) + bm.get(0, j);
                value.set(i, j, v);
            }
        }
        let rg = self.requires(x) || self.requires(bias);
        Ok(self.push(value, Op::AddRowBroadcast(x, bias), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let rg = self.requires(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.requires(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.requires(a);
        self.push(value, Op::Tanh(a), rg)
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let input = self.value(a);
        let mut value = Matrix2D::zeros(input.rows(), input.cols());
        for i in 0..input.rows() {
            let mut row_max = f64::NEG_INFINITY;
            for j in 0..input.cols() {
                row_max = row_max.max(input.get(i, j));
            }
            let mut denom = 0.0;
            for j in 0..input.cols() {
                let e = (input.get(i, j) - row_max).exp();
                value.set(i, j, e);
                denom += e;
            }
            for j in 0..input.cols() {
                value.set(i, j, value.get(i, j) / denom);
            }
        }
        let rg = self.requires(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Mean squared error over all entries; returns a scalar node.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse_loss",
                left_rows: p.rows(),
                left_cols: p.cols(),
                right_rows: t.rows(),
                right_cols: t.cols(),
            });
        }
        let n = p.len() as f64;
        let sum: f64 = p
            .data()
            .iter()
            .zip(t.data().iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let value = Matrix2D::from_vec(1, 1, vec![sum / n]).expect("1x1");
        let rg = self.requires(pred) || self.requires(target);
        Ok(self.push(value, Op::MseLoss(pred, target), rg))
    }

    /// Mean of scalar nodes; returns a scalar node.
    pub fn mean_scalars(&mut self, vs: &[Var]) -> Result<Var> {
        if vs.is_empty() {
            return Err(Error::Usage("mean_scalars over empty list".into()));
        }
        let mut sum = 0.0;
        let mut rg = false;
        for &v in vs {
            let m = self.value(v);
            if m.shape() != (1, 1) {
                return Err(Error::Usage("mean_scalars over non-scalar node".into()));
            }
            sum += m.get(0, 0);
            rg |= self.requires(v);
        }
        let value = Matrix2D::from_vec(1, 1, vec![sum / vs.len() as f64]).expect("1x1");
        Ok(self.push(value, Op::MeanScalars(vs.to_vec()), rg))
    }

    /// Gradient of a scalar node with respect to every gradient-requiring
    /// value on the tape. The tape is not consumed; calling `backward` twice
    /// returns the same gradients twice, and accumulation into parameters is
    /// the caller's business.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "backward on a value not recorded on this tape (node {} of {})",
                loss.0,
                self.nodes.len()
            )));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Usage(
                "backward requires a scalar (1x1) loss node".into(),
            ));
        }
        let mut grads: Vec<Option<Matrix2D>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix2D::from_vec(1, 1, vec![1.0]).expect("1x1"));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_vjp(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix2D>], v: Var, delta: Matrix2D) -> Result<()> {
        if !self.requires(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn apply_vjp(&self, idx: usize, g: &Matrix2D, grads: &mut [Option<Matrix2D>]) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires(*a) {
                    let delta = g.matmul(&self.value(*b).transpose())?;
                    self.accumulate(grads, *a, delta)?;
                }
                if self.requires(*b) {
                    let delta = self.value(*a).transpose().matmul(g)?;
                    self.accumulate(grads, *b, delta)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::AddRowBroadcast(x, bias) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.requires(*bias) {
                    let mut db = Matrix2D::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            db.set(0, j, db.get(0, j) + g.get(i, j));
                        }
                    }
                    self.accumulate(grads, *bias, db)?;
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.scale(*c))?;
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose())?;
            }
            Op::Tanh(a) => {
                // d tanh(x) = 1 - tanh(x)^2, read from the cached output.
                let out = &self.nodes[idx].value;
                let mut delta = g.clone();
                for (d, &y) in delta.data_mut().iter_mut().zip(out.data().iter()) {
                    *d *= 1.0 - y * y;
                }
                self.accumulate(grads, *a, delta)?;
            }
            Op::SoftmaxRows(a) => {
                let s = &self.nodes[idx].value;
                let mut delta = Matrix2D::zeros(s.rows(), s.cols());
                for i in 0..s.rows() {
                    let mut dot = 0.0;
                    for j in 0..s.cols() {
                        dot += g.get(i, j) * s.get(i, j);
                    }
                    for j in 0..s.cols() {
                        delta.set(i, j, s.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                self.accumulate(grads, *a, delta)?;
            }
            Op::MseLoss(pred, target) => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let scale = 2.0 * g.get(0, 0) / p.len() as f64;
                if self.requires(*pred) {
                    let delta = p.sub(t)?.scale(scale);
                    self.accumulate(grads, *pred, delta)?;
                }
                if self.requires(*target) {
                    let delta = t.sub(p)?.scale(scale);
                    self.accumulate(grads, *target, delta)?;
                }
            }
            Op::MeanScalars(vs) => {
                let share = g.get(0, 0) / vs.len() as f64;
                for &v in vs {
                    let delta = Matrix2D::from_vec(1, 1, vec![share]).expect("1x1");
                    self.accumulate(grads, v, delta)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_trivial_values() {
        let mut tape = Tape::new();
        let p = tape.leaf(Matrix2D::from_rows(&[vec![1.0, 2.0]]).unwrap(), false);
        let same = tape.mse_loss(p, p).unwrap();
        assert_eq!(tape.scalar_value(same), 0.0);

        let a = tape.leaf(Matrix2D::from_vec(1, 1, vec![1.0]).unwrap(), false);
        let b = tape.leaf(Matrix2D::from_vec(1, 1, vec![3.0]).unwrap(), false);
        let l = tape.mse_loss(a, b).unwrap();
        assert_eq!(tape.scalar_value(l), 4.0);
    }

    #[test]
    fn mse_matches_scalar_computation() {
        // (1^2 + 2^2) / 2 computed by hand.
        let mut tape = Tape::new();
        let p = tape.leaf(Matrix2D::from_rows(&[vec![1.0, 2.0]]).unwrap(), false);
        let t = tape.leaf(Matrix2D::from_rows(&[vec![0.0, 0.0]]).unwrap(), false);
        let l = tape.mse_loss(p, t).unwrap();
        assert_eq!(tape.scalar_value(l), 2.5);
    }

    #[test]
    fn backward_simple_product() {
        // L = mse(x.w, y), x=1, w=2, y=0  =>  dL/dw = 2x(xw - y) = 4.
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix2D::from_vec(1, 1, vec![1.0]).unwrap(), false);
        let w = tape.leaf(Matrix2D::from_vec(1, 1, vec![2.0]).unwrap(), true);
        let y = tape.leaf(Matrix2D::from_vec(1, 1, vec![0.0]).unwrap(), false);
        let pred = tape.matmul(x, w).unwrap();
        let loss = tape.mse_loss(pred, y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let dw = grads.get(w).unwrap();
        assert!((dw.get(0, 0) - 4.0).abs() < 1e-12);

        // Central finite difference with h = 1e-5 agrees.
        let fd = {
            let h = 1e-5;
            let eval = |wv: f64| {
                let mut t2 = Tape::new();
                let x = t2.leaf(Matrix2D::from_vec(1, 1, vec![1.0]).unwrap(), false);
                let w = t2.leaf(Matrix2D::from_vec(1, 1, vec![wv]).unwrap(), false);
                let y = t2.leaf(Matrix2D::from_vec(1, 1, vec![0.0]).unwrap(), false);
                let p = t2.matmul(x, w).unwrap();
                let l = t2.mse_loss(p, y).unwrap();
                t2.scalar_value(l)
            };
            (eval(2.0 + 1e-5) - eval(2.0 - 1e-5)) / (2.0 * h)
        };
        assert!((dw.get(0, 0) - fd).abs() < 1e-6);
    }

    #[test]
    fn unreachable_parameter_has_no_grad() {
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix2D::from_vec(1, 1, vec![2.0]).unwrap(), true);
        let unused = tape.leaf(Matrix2D::from_vec(1, 1, vec![5.0]).unwrap(), true);
        let y = tape.leaf(Matrix2D::from_vec(1, 1, vec![0.0]).unwrap(), false);
        let loss = tape.mse_loss(w, y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(w).is_some());
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn backward_twice_gives_identical_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix2D::from_rows(&[vec![1.0, -2.0]]).unwrap(), false);
        let w = tape.leaf(
            Matrix2D::from_rows(&[vec![0.5], vec![1.5]]).unwrap(),
            true,
        );
        let y = tape.leaf(Matrix2D::from_vec(1, 1, vec![1.0]).unwrap(), false);
        let p = tape.matmul(x, w).unwrap();
        let loss = tape.mse_loss(p, y).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.get(w).unwrap(), g2.get(w).unwrap());
    }

    #[test]
    fn backward_rejects_foreign_and_nonscalar_nodes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix2D::from_rows(&[vec![1.0, 2.0]]).unwrap(), true);
        assert!(tape.backward(Var(17)).is_err());
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let a = tape.leaf(
            Matrix2D::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 1.0]]).unwrap(),
            false,
        );
        let s = tape.softmax_rows(a);
        let sv = tape.value(s);
        for i in 0..2 {
            let row_sum: f64 = (0..3).map(|j| sv.get(i, j)).sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_scalars_averages() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix2D::from_vec(1, 1, vec![1.0]).unwrap(), false);
        let b = tape.leaf(Matrix2D::from_vec(1, 1, vec![3.0]).unwrap(), false);
        let m = tape.mean_scalars(&[a, b]).unwrap();
        assert_eq!(tape.scalar_value(m), 2.0);
        assert!(tape.mean_scalars(&[]).is_err());
    }
}
