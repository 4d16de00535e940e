//! SeLoRA-wrapped linear layers: a frozen base `W0, b0` plus trainable
//! low-rank factors `A (d_in x r)` and `B (r x d_out)` whose rank grows one
//! column/row at a time.
//!
//! The expansion contract is the heart of the crate: appending a Kaiming
//! column `K` to A and a zero row to B leaves the layer function unchanged,
//! because the new contribution is `(x K) * 0`. Everything downstream (the
//! Fisher probe, Algorithm 1's accept branch) leans on that no-op property.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::kaiming_uniform;
use crate::matrix::Matrix2D;
use crate::param::Parameter;
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};

/// One accepted expansion, as recorded in run logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionEvent {
    pub layer_id: String,
    pub step: u64,
    pub old_rank: usize,
    pub new_rank: usize,
    #[serde(
        serialize_with = "crate::config::ser_ratio",
        deserialize_with = "crate::config::de_ratio"
    )]
    pub fi_ratio: f64,
}

#[derive(Debug)]
pub struct SeLoRALinear {
    pub layer_id: String,
    w0: Parameter,
    b0: Parameter,
    a: Parameter,
    b: Parameter,
    rank: usize,
    max_rank: usize,
    /// Off-contract ablation knob; 1.0 means the plain product AB.
    pub scale: f64,
}

/// Tape handles for one registered adapter.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub w0: Var,
    pub b0: Var,
    pub a: Var,
    pub b: Var,
}

impl SeLoRALinear {
    /// Fresh adapter at rank 1: A is Kaiming-uniform, B is zero, so the
    /// wrapped layer initially computes exactly `x W0 + b0`.
    pub fn new(
        layer_id: impl Into<String>,
        w0: Matrix2D,
        b0: Matrix2D,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Self::with_rank(layer_id, w0, b0, 1, rng)
    }

    /// Fixed-rank construction (the LoRA baseline): A Kaiming at rank r, B
    /// zero. `with_rank(.., 1, ..)` consumes exactly the same random draws
    /// as `new`, which keeps λ=∞ SeLoRA and fixed rank-1 runs bit-identical.
    pub fn with_rank(
        layer_id: impl Into<String>,
        w0: Matrix2D,
        b0: Matrix2D,
        rank: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let layer_id = layer_id.into();
        if rank == 0 {
            return Err(Error::InvalidDimension(format!(
                "adapter '{layer_id}': rank must be at least 1"
            )));
        }
        if b0.rows() != 1 || b0.cols() != w0.cols() {
            return Err(Error::ShapeMismatch {
                op: "new_adapter",
                left_rows: w0.rows(),
                left_cols: w0.cols(),
                right_rows: b0.rows(),
                right_cols: b0.cols(),
            });
        }
        let (d_in, d_out) = w0.shape();
        if rank > d_in {
            return Err(Error::InvalidDimension(format!(
                "adapter '{layer_id}': rank {rank} exceeds d_in {d_in}"
            )));
        }
        let a = kaiming_uniform(d_in, rank, rng);
        let b = Matrix2D::zeros(rank, d_out);
        Ok(SeLoRALinear {
            w0: Parameter::frozen(format!("{layer_id}.W0"), w0),
            b0: Parameter::frozen(format!("{layer_id}.b0"), b0),
            a: Parameter::new(format!("{layer_id}.A"), a, true),
            b: Parameter::new(format!("{layer_id}.B"), b, true),
            rank,
            max_rank: usize::MAX,
            scale: 1.0,
            layer_id,
        })
    }

    pub fn set_max_rank(&mut self, max_rank: usize) -> Result<()> {
        if max_rank < self.rank {
            return Err(Error::InvalidDimension(format!(
                "adapter '{}': max_rank {} below current rank {}",
                self.layer_id, max_rank, self.rank
            )));
        }
        self.max_rank = max_rank;
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.w0.value().rows()
    }

    pub fn d_out(&self) -> usize {
        self.w0.value().cols()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn max_rank(&self) -> usize {
        self.max_rank
    }

    pub fn a(&self) -> &Parameter {
        &self.a
    }

    pub fn b(&self) -> &Parameter {
        &self.b
    }

    pub fn w0(&self) -> &Parameter {
        &self.w0
    }

    pub fn b0(&self) -> &Parameter {
        &self.b0
    }

    /// The two trainable factors, for optimizer steps and grad routing.
    pub fn trainable_params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.a, &mut self.b]
    }

    /// Accumulate routed gradients into A and B.
    pub fn accumulate_factor_grads(&mut self, da: Option<&Matrix2D>, db: Option<&Matrix2D>) -> Result<()> {
        if let Some(da) = da {
            self.a.accumulate_grad(da)?;
        }
        if let Some(db) = db {
            self.b.accumulate_grad(db)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.a.zero_grad();
        self.b.zero_grad();
    }

    /// Untaped forward: `x W0 + (x A) B * scale + b0`, the dense base product
    /// plus two low-rank products. `W0 + AB` is never materialized here.
    pub fn forward(&self, x: &Matrix2D) -> Result<Matrix2D> {
        self.forward_with_factors(x, self.a.value(), self.b.value())
    }

    /// Forward with explicit factors, used by the Fisher probe to evaluate a
    /// hypothetical `[A K], [B; 0]` pair without touching the adapter.
    pub fn forward_with_factors(&self, x: &Matrix2D, a: &Matrix2D, b: &Matrix2D) -> Result<Matrix2D> {
        let base = x.matmul(self.w0.value())?;
        let low = x.matmul(a)?.matmul(b)?.scale(self.scale);
        let mut out = base.add(&low)?;
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                let v = out.get(i, j) + self.b0.value().get(0, j);
                out.set(i, j, v);
            }
        }
        Ok(out)
    }

    /// Register the adapter's matrices as tape leaves. Only A and B require
    /// gradients; W0 and b0 are constants on every tape.
    pub fn register_on_tape(&self, tape: &mut Tape) -> AdapterVars {
        self.register_with_factors(tape, self.a.value().clone(), self.b.value().clone())
    }

    /// Register with substitute factors (the probe's expanded pair). The
    /// leaves still require gradients so the probe can read per-sample
    /// gradients of the hypothetical factors.
    pub fn register_with_factors(&self, tape: &mut Tape, a: Matrix2D, b: Matrix2D) -> AdapterVars {
        AdapterVars {
            w0: tape.leaf(self.w0.value().clone(), false),
            b0: tape.leaf(self.b0.value().clone(), false),
            a: tape.leaf(a, true),
            b: tape.leaf(b, true),
        }
    }

    /// Taped forward for an already-registered adapter. Call once per sample
    /// against the same `AdapterVars` so per-sample gradients land on the
    /// same leaves.
    pub fn forward_registered(&self, tape: &mut Tape, vars: AdapterVars, x: Var) -> Result<Var> {
        let base = tape.matmul(x, vars.w0)?;
        let xa = tape.matmul(x, vars.a)?;
        let mut low = tape.matmul(xa, vars.b)?;
        if self.scale != 1.0 {
            low = tape.scale(low, self.scale);
        }
        let sum = tape.add(base, low)?;
        tape.add_row_broadcast(sum, vars.b0)
    }

    /// The hypothetical expanded factors `A' = [A K]`, `B' = [B; 0]` for a
    /// given column K. Pure; the adapter is untouched.
    pub fn expanded_factors(&self, k: &Matrix2D) -> Result<(Matrix2D, Matrix2D)> {
        if k.shape() != (self.d_in(), 1) {
            return Err(Error::ShapeMismatch {
                op: "expanded_factors",
                left_rows: self.d_in(),
                left_cols: 1,
                right_rows: k.rows(),
                right_cols: k.cols(),
            });
        }
        let a = self.a.value().with_appended_column(k)?;
        let b = self.b.value().with_appended_zero_row();
        Ok((a, b))
    }

    /// Draw a Kaiming column for expansion without applying it.
    pub fn draw_expansion_column(&self, rng: &mut SeededRng) -> Matrix2D {
        kaiming_uniform(self.d_in(), 1, rng)
    }

    /// Expand by one rank with a freshly drawn Kaiming column.
    pub fn expand(&mut self, rng: &mut SeededRng) -> Result<()> {
        let k = self.draw_expansion_column(rng);
        self.expand_with_column(&k)
    }

    /// Expand by one rank installing the exact column `k` (the probed column
    /// becomes the accepted column). Refused with an explicit error at the
    /// rank cap. Gradients and, via name-keyed state, optimizer moments are
    /// resized with zero-filled new entries.
    pub fn expand_with_column(&mut self, k: &Matrix2D) -> Result<()> {
        if self.rank >= self.max_rank {
            return Err(Error::RankCapReached {
                layer_id: self.layer_id.clone(),
                rank: self.rank,
            });
        }
        let (a, b) = self.expanded_factors(k)?;
        self.a.grow_value(a)?;
        self.b.grow_value(b)?;
        self.rank += 1;
        Ok(())
    }

    /// Dense `W0 + A B` for export and as the test oracle.
    pub fn merge_weights(&self) -> Matrix2D {
        let low = self
            .a
            .value()
            .matmul(self.b.value())
            .expect("factor shapes are maintained by construction")
            .scale(self.scale);
        self.w0.value().add(&low).expect("same shape as W0")
    }

    /// rank * (d_in + d_out): exactly the entries the optimizer may update.
    pub fn trainable_param_count(&self) -> usize {
        self.rank * (self.d_in() + self.d_out())
    }

    /// Combined checksum of the frozen base, for integrity assertions.
    pub fn frozen_checksum(&self) -> u64 {
        self.w0.checksum() ^ self.b0.checksum().rotate_left(1)
    }

    /// Serializable snapshot of the adapter's mutable state plus base
    /// fingerprints. f64 values survive the JSON round trip exactly
    /// (shortest-round-trip float printing).
    pub fn checkpoint(&self) -> AdapterCheckpoint {
        AdapterCheckpoint {
            layer_id: self.layer_id.clone(),
            d_in: self.d_in(),
            d_out: self.d_out(),
            rank: self.rank,
            max_rank: self.max_rank,
            scale: self.scale,
            w0_checksum: self.w0.checksum(),
            b0_checksum: self.b0.checksum(),
            a: self.a.value().data().to_vec(),
            b: self.b.value().data().to_vec(),
        }
    }

    /// Rebuild an adapter from a checkpoint and the original frozen base.
    /// The base is fingerprint-checked; a mismatch is an error, not a guess.
    pub fn restore(cp: &AdapterCheckpoint, w0: Matrix2D, b0: Matrix2D) -> Result<Self> {
        if w0.shape() != (cp.d_in, cp.d_out) || w0.checksum() != cp.w0_checksum {
            return Err(Error::CheckpointMismatch(format!(
                "layer {}: W0 shape or checksum differs from the checkpointed base",
                cp.layer_id
            )));
        }
        if b0.shape() != (1, cp.d_out) || b0.checksum() != cp.b0_checksum {
            return Err(Error::CheckpointMismatch(format!(
                "layer {}: b0 shape or checksum differs from the checkpointed base",
                cp.layer_id
            )));
        }
        let a = Matrix2D::from_vec(cp.d_in, cp.rank, cp.a.clone())?;
        let b = Matrix2D::from_vec(cp.rank, cp.d_out, cp.b.clone())?;
        Ok(SeLoRALinear {
            w0: Parameter::frozen(format!("{}.W0", cp.layer_id), w0),
            b0: Parameter::frozen(format!("{}.b0", cp.layer_id), b0),
            a: Parameter::new(format!("{}.A", cp.layer_id), a, true),
            b: Parameter::new(format!("{}.B", cp.layer_id), b, true),
            rank: cp.rank,
            max_rank: cp.max_rank,
            scale: cp.scale,
            layer_id: cp.layer_id.clone(),
        })
    }
}

/// JSON-serializable adapter state. W0/b0 are stored as checksums only; the
/// frozen base travels with the model definition, not the checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterCheckpoint {
    pub layer_id: String,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub max_rank: usize,
    pub scale: f64,
    pub w0_checksum: u64,
    pub b0_checksum: u64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}
