//! Desk-scale experiment harness: deterministic tasks, the training loop,
//! and the small statistics used by the acceptance checks.

pub mod denoiser;
pub mod stats;
pub mod teacher;
pub mod train;
