//! The contract between models-with-adapters and the training/Fisher
//! machinery.
//!
//! A net records a whole batch on one tape and hands back one scalar loss
//! node per sample plus the tape handles of every adapter's factors. Mean
//! the losses and backward once for a training step; backward each loss
//! separately for per-sample Fisher gradients. Both reuse the same tape.

use std::collections::BTreeMap;

use crate::adapter::{AdapterVars, SeLoRALinear};
use crate::error::{Error, Result};
use crate::matrix::Matrix2D;
use crate::tape::{Gradients, Tape, Var};

/// Substitute factors for exactly one layer, used by the Fisher probe to
/// evaluate the hypothetical expansion `[A K], [B; 0]` without mutating
/// anything.
#[derive(Debug, Clone)]
pub struct FactorOverride {
    pub layer_id: String,
    pub a: Matrix2D,
    pub b: Matrix2D,
}

/// layer_id -> tape handles for each adapter registered on a tape.
#[derive(Debug, Default)]
pub struct TapeBindings {
    vars: BTreeMap<String, AdapterVars>,
}

impl TapeBindings {
    pub fn insert(&mut self, layer_id: &str, vars: AdapterVars) {
        self.vars.insert(layer_id.to_string(), vars);
    }

    pub fn get(&self, layer_id: &str) -> Option<&AdapterVars> {
        self.vars.get(layer_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &AdapterVars)> {
        self.vars.iter()
    }

    /// Register `adapter` honoring an optional override targeted at it.
    pub fn register(
        &mut self,
        tape: &mut Tape,
        adapter: &SeLoRALinear,
        overrides: Option<&FactorOverride>,
    ) -> AdapterVars {
        let vars = match overrides {
            Some(o) if o.layer_id == adapter.layer_id => {
                adapter.register_with_factors(tape, o.a.clone(), o.b.clone())
            }
            _ => adapter.register_on_tape(tape),
        };
        self.insert(&adapter.layer_id, vars);
        vars
    }
}

/// A model whose linear layers are wrapped with SeLoRA adapters.
pub trait AdapterNet {
    /// One training example, task-specific.
    type Sample;

    /// Adapter layer ids in deterministic (sorted) order.
    fn layer_ids(&self) -> Vec<String>;

    fn adapter(&self, layer_id: &str) -> Option<&SeLoRALinear>;

    fn adapter_mut(&mut self, layer_id: &str) -> Option<&mut SeLoRALinear>;

    /// Record the forward pass of every sample on `tape`, registering each
    /// adapter exactly once, and return one scalar loss node per sample.
    /// `overrides` swaps in substitute factors for at most one layer.
    fn batch_losses(
        &self,
        tape: &mut Tape,
        samples: &[Self::Sample],
        overrides: Option<&FactorOverride>,
    ) -> Result<(Vec<Var>, TapeBindings)>;
}

/// Route factor gradients from a backward pass into the adapters' grad
/// accumulators. Leaves untouched adapters alone (their grads stay as they
/// were).
pub fn route_gradients<N: AdapterNet>(
    net: &mut N,
    bindings: &TapeBindings,
    grads: &Gradients,
) -> Result<()> {
    for (layer_id, vars) in bindings.iter() {
        let adapter = net.adapter_mut(layer_id).ok_or_else(|| {
            Error::Usage(format!("gradient routing: unknown layer '{layer_id}'"))
        })?;
        adapter.accumulate_factor_grads(grads.get(vars.a), grads.get(vars.b))?;
    }
    Ok(())
}

/// Zero every adapter's factor gradients.
pub fn zero_all_grads<N: AdapterNet>(net: &mut N) {
    for id in net.layer_ids() {
        if let Some(a) = net.adapter_mut(&id) {
            a.zero_grads();
        }
    }
}

/// Sum of trainable parameter counts across adapters.
pub fn total_trainable_params<N: AdapterNet>(net: &N) -> usize {
    net.layer_ids()
        .iter()
        .filter_map(|id| net.adapter(id))
        .map(|a| a.trainable_param_count())
        .sum()
}

/// Combined frozen-base checksum across adapters, for integrity assertions.
pub fn frozen_fingerprint<N: AdapterNet>(net: &N) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for id in net.layer_ids() {
        if let Some(a) = net.adapter(id.as_str()) {
            h ^= a.frozen_checksum();
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}
