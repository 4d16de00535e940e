//! Named parameters: a value matrix, a like-shaped gradient accumulator, and
//! a trainable flag. Optimizers refuse to touch frozen parameters; gradient
//! routing refuses shape drift.

use crate::error::{Error, Result};
use crate::matrix::Matrix2D;

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    value: Matrix2D,
    grad: Matrix2D,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix2D, trainable: bool) -> Self {
        let grad = Matrix2D::zeros(value.rows(), value.cols());
        Parameter {
            name: name.into(),
            value,
            grad,
            trainable,
        }
    }

    pub fn frozen(name: impl Into<String>, value: Matrix2D) -> Self {
        Self::new(name, value, false)
    }

    pub fn value(&self) -> &Matrix2D {
        &self.value
    }

    pub fn grad(&self) -> &Matrix2D {
        &self.grad
    }

    /// In-place update access for optimizers. Frozen parameters return an
    /// error rather than a mutable view.
    pub fn value_mut(&mut self) -> Result<&mut Matrix2D> {
        if !self.trainable {
            return Err(Error::Usage(format!(
                "attempted to mutate frozen parameter '{}'",
                self.name
            )));
        }
        Ok(&mut self.value)
    }

    /// Add `delta` into the gradient accumulator. Accumulates across calls
    /// until `zero_grad`.
    pub fn accumulate_grad(&mut self, delta: &Matrix2D) -> Result<()> {
        self.grad.add_assign(delta).map_err(|_| Error::ShapeMismatch {
            op: "accumulate_grad",
            left_rows: self.grad.rows(),
            left_cols: self.grad.cols(),
            right_rows: delta.rows(),
            right_cols: delta.cols(),
        })
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Replace the value with a grown version of itself, zero-filling the
    /// gradient accumulator's new entries and preserving the old ones. The
    /// new shape must dominate the old in both dimensions.
    pub fn grow_value(&mut self, new_value: Matrix2D) -> Result<()> {
        if new_value.rows() < self.value.rows() || new_value.cols() < self.value.cols() {
            return Err(Error::Usage(format!(
                "grow_value on '{}' would shrink {}x{} to {}x{}",
                self.name,
                self.value.rows(),
                self.value.cols(),
                new_value.rows(),
                new_value.cols()
            )));
        }
        self.grad = self.grad.resize_preserving(new_value.rows(), new_value.cols());
        self.value = new_value;
        Ok(())
    }

    /// FNV-1a checksum of the value, for frozen-base integrity assertions.
    pub fn checksum(&self) -> u64 {
        self.value.checksum()
    }
}
