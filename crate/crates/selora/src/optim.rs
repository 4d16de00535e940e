//! Optimizers over `Parameter` collections. Adam is the training default;
//! plain SGD exists as an oracle for hand-checkable update tests.
//!
//! Moment state is keyed by parameter name and is resized (old entries kept,
//! new entries zeroed) when a parameter grew since the last step, which is
//! exactly what rank expansion does to A and B.

use std::collections::HashMap;

use crate::error::Result;
use crate::matrix::Matrix2D;
use crate::param::Parameter;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug)]
struct Moments {
    m: Matrix2D,
    v: Matrix2D,
}

#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            state: HashMap::new(),
        }
    }

    pub fn with_lr(lr: f64) -> Self {
        Adam::new(AdamConfig {
            lr,
            ..AdamConfig::default()
        })
    }

    /// One Adam step over the given parameters. Frozen parameters are
    /// skipped entirely, whatever their gradients say.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        self.begin_step();
        self.apply(params)
    }

    /// Advance the shared step counter. Pair with `apply` when one logical
    /// step must cover parameter groups that cannot be borrowed together.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Apply the update at the current step counter.
    pub fn apply(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        assert!(self.t >= 1, "apply called before begin_step");
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for p in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let (rows, cols) = p.value().shape();
            let entry = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: Matrix2D::zeros(rows, cols),
                v: Matrix2D::zeros(rows, cols),
            });
            if entry.m.shape() != (rows, cols) {
                entry.m = entry.m.resize_preserving(rows, cols);
                entry.v = entry.v.resize_preserving(rows, cols);
            }
            let grad = p.grad().clone();
            let value = p.value_mut()?;
            for i in 0..rows * cols {
                let g = grad.data()[i];
                let m = self.cfg.beta1 * entry.m.data()[i] + (1.0 - self.cfg.beta1) * g;
                let v = self.cfg.beta2 * entry.v.data()[i] + (1.0 - self.cfg.beta2) * g * g;
                entry.m.data_mut()[i] = m;
                entry.v.data_mut()[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                value.data_mut()[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

/// Plain gradient descent, for oracle tests.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&self, params: &mut [&mut Parameter]) -> Result<()> {
        for p in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let grad = p.grad().clone();
            let value = p.value_mut()?;
            for i in 0..grad.len() {
                value.data_mut()[i] -= self.lr * grad.data()[i];
            }
        }
        Ok(())
    }
}
