//! Self-expanding low-rank adapters (SeLoRA) with an empirical-Fisher
//! expansion test, plus the deterministic experiment harness that exercises
//! them.
//!
//! The pieces, bottom up:
//! - [`matrix`], [`rng`], [`init`]: dense row-major matrices, a seeded
//!   splittable RNG, and weight initializers.
//! - [`tape`]: reverse-mode autodiff over matrix programs. Backward is
//!   non-mutating and repeatable, which the per-sample Fisher estimator
//!   relies on.
//! - [`param`], [`optim`]: named parameters with gradient accumulators, and
//!   Adam/SGD over them.
//! - [`adapter`]: the SeLoRA linear layer `x W0 + (x A B) * scale + b0` with
//!   output-preserving rank expansion.
//! - [`fisher`]: empirical Fisher information of the factors, FI scores and
//!   ratios, and the periodic expansion test.
//! - [`net`]: the trait tying a model's adapters to the trainer and probe.
//! - [`harness`]: teacher-student rank recovery, a conditional toy
//!   denoiser, the Algorithm-1 training loop, and run reports.
//! - [`config`], [`runner`]: experiment configuration files and the CLI
//!   entry points that produce run artifacts on disk.

pub mod adapter;
pub mod config;
pub mod error;
pub mod fisher;
pub mod harness;
pub mod init;
pub mod matrix;
pub mod net;
pub mod optim;
pub mod param;
pub mod rng;
pub mod runner;
pub mod tape;

pub use error::{Error, Result};
