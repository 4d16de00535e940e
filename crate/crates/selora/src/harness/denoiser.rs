//! Conditional toy denoiser. Four image tokens pass through attention blocks
//! (self-attention, cross-attention against two condition tokens, then a
//! tanh feed-forward, each with a residual connection). The network is first
//! pretrained to denoise unconditionally, then every linear map is frozen
//! and wrapped with a SeLoRA adapter.
//!
//! The fine-tuning target for a sample is the clean latents plus the change
//! the pretrained network's output undergoes when its cross-attention logits
//! are nudged: token i's logit onto the active condition embedding is shifted
//! by strength * tanh(z_i . w_c), a graded function of the token's clean
//! latent coordinates and a routing vector chosen by the condition token.
//! Two pressures with very different shapes result. Finishing the denoising
//! job is unconditional; its feed-forward-reachable part is a few large
//! directions that the ffn adapters absorb quickly, after which their
//! expansion tests go quiet. The logit modulation is solvable only in the
//! cross-attention q and k maps, spread across many low-amplitude
//! content/condition directions, the regime in which the Fisher ratio keeps
//! approving expansions long after the feed-forward path has settled. At
//! strength 0 both pressures are gated off and the targets coincide with the
//! network's own outputs, so the control run has exactly zero residual and
//! the expansion test never fires.

use std::collections::BTreeMap;

use crate::adapter::{AdapterVars, SeLoRALinear};
use crate::error::{Error, Result};
use crate::harness::train::{tags, BaselineMode, Dataset};
use crate::init::{gaussian, kaiming_uniform};
use crate::matrix::Matrix2D;
use crate::net::{AdapterNet, FactorOverride, TapeBindings};
use crate::optim::{Adam, AdamConfig};
use crate::param::Parameter;
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};

/// Image token count.
const N_TOKENS: usize = 4;
/// Input corruption scale for both pretraining and fine-tuning data.
const NOISE_STD: f64 = 0.5;
const PRETRAIN_LR: f64 = 0.01;
const PRETRAIN_BATCH: usize = 8;

/// Rank of the clean-latent subspace; denoising means projecting onto it.
/// Half the ambient dimension keeps the conditional routing rich without
/// making the latents trivial to separate from noise.
fn latent_rank(image_dim: usize) -> usize {
    (image_dim / 2).max(1)
}

#[derive(Debug, Clone)]
pub struct ToyDenoiserSpec {
    pub image_dim: usize,
    pub text_dim: usize,
    pub hidden_dim: usize,
    pub n_attention_blocks: usize,
    /// Number of distinct synthetic condition tokens.
    pub vocab_size: usize,
    /// Scales the conditional target shift. Zero also zeroes the condition
    /// embeddings, turning the fine-tuning task into the pretraining task.
    pub condition_strength: f64,
    pub n_samples: usize,
    /// Unconditional denoising steps before the freeze. Deliberately short:
    /// the refinement left undone is what lets fine-tuning stop expanding
    /// layers outside cross-attention q,k.
    pub pretrain_steps: u64,
    pub seed: u64,
}

impl Default for ToyDenoiserSpec {
    fn default() -> Self {
        ToyDenoiserSpec {
            image_dim: 16,
            text_dim: 8,
            hidden_dim: 32,
            n_attention_blocks: 2,
            vocab_size: 2,
            condition_strength: 2.0,
            n_samples: 256,
            pretrain_steps: 50,
            seed: 1,
        }
    }
}

impl ToyDenoiserSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_dim < N_TOKENS {
            return Err(Error::InvalidDimension(format!(
                "denoiser spec: image_dim must be at least {N_TOKENS}"
            )));
        }
        if self.text_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidDimension(
                "denoiser spec: text_dim and hidden_dim must be positive".into(),
            ));
        }
        // Single attention head, so any hidden_dim divides evenly.
        if !(1..=4).contains(&self.n_attention_blocks) {
            return Err(Error::InvalidDimension(
                "denoiser spec: n_attention_blocks must be in 1..=4".into(),
            ));
        }
        if !(2..=4).contains(&self.vocab_size) {
            return Err(Error::InvalidDimension(
                "denoiser spec: vocab_size must be in 2..=4".into(),
            ));
        }
        if !self.condition_strength.is_finite() || self.condition_strength < 0.0 {
            return Err(Error::InvalidDimension(
                "denoiser spec: condition_strength must be finite and >= 0".into(),
            ));
        }
        if self.n_samples < 10 {
            return Err(Error::InvalidDimension(
                "denoiser spec: n_samples must be at least 10".into(),
            ));
        }
        Ok(())
    }
}

/// One fine-tuning example. `clean` and `condition` are carried for
/// diagnostics only; the loss compares the model output against `target`.
#[derive(Debug, Clone)]
pub struct DenoiserSample {
    /// N_TOKENS x image_dim corrupted latents.
    pub noisy: Matrix2D,
    /// 2 x text_dim: the active condition embedding over the null embedding.
    pub cond: Matrix2D,
    /// N_TOKENS x image_dim regression target. Freshly drawn samples carry
    /// the clean latents here (the pretraining objective); the fine-tuning
    /// dataset overwrites it with the clean latents plus the change the
    /// sample's cross-attention logit shift induces in the pretrained
    /// network's output.
    pub target: Matrix2D,
    pub clean: Matrix2D,
    pub condition: usize,
}

/// Frozen task randomness: everything that defines the data distribution.
#[derive(Debug, Clone)]
struct TaskStructure {
    latent_basis: Matrix2D,
    embeddings: Vec<Matrix2D>,
    null_embedding: Matrix2D,
    /// vocab x latent_rank mixing vectors; row c weights the latent
    /// coordinates that grade the logit shift under condition c.
    routing: Matrix2D,
    strength: f64,
    vocab: usize,
}

impl TaskStructure {
    fn draw(spec: &ToyDenoiserSpec) -> Self {
        let mut rng = SeededRng::derive(spec.seed, tags::DEN_STRUCT);
        let lr = latent_rank(spec.image_dim);
        let latent_basis = gaussian(lr, spec.image_dim, 1.0, &mut rng);
        // Embeddings stay at unit scale whenever conditioning is on at all;
        // strength grades only the logit shift. At zero the embeddings are
        // zeroed with it so no class information reaches the network.
        let emb_gate = if spec.condition_strength > 0.0 { 1.0 } else { 0.0 };
        let embeddings = (0..spec.vocab_size)
            .map(|_| gaussian(1, spec.text_dim, 1.0, &mut rng).scale(emb_gate))
            .collect();
        let null_embedding = gaussian(1, spec.text_dim, 1.0, &mut rng);
        // Unit variance per dot product keeps tanh in its graded region.
        let routing = gaussian(spec.vocab_size, lr, 1.0 / (lr as f64).sqrt(), &mut rng);
        TaskStructure {
            latent_basis,
            embeddings,
            null_embedding,
            routing,
            strength: spec.condition_strength,
            vocab: spec.vocab_size,
        }
    }

    /// Draw one example plus its per-token cross-attention logit shift.
    /// `conditional` gates the shift; pretraining passes false and gets
    /// zeros. The rng consumption is identical either way, and the target
    /// starts out as the clean latents in both cases.
    fn draw_sample(
        &self,
        rng: &mut SeededRng,
        conditional: bool,
    ) -> Result<(DenoiserSample, Vec<f64>)> {
        let dim = self.latent_basis.cols();
        let lr = self.latent_basis.rows();
        let condition = rng.below(self.vocab);
        let z = gaussian(N_TOKENS, lr, 1.0, rng);
        let clean = z.matmul(&self.latent_basis)?;
        let noisy = clean.add(&gaussian(N_TOKENS, dim, NOISE_STD, rng))?;
        let mut cond = Matrix2D::zeros(2, self.null_embedding.cols());
        for j in 0..cond.cols() {
            cond.set(0, j, self.embeddings[condition].get(0, j));
            cond.set(1, j, self.null_embedding.get(0, j));
        }
        let mut delta = vec![0.0; N_TOKENS];
        if conditional && self.strength > 0.0 {
            for (i, d) in delta.iter_mut().enumerate() {
                let mut dot = 0.0;
                for k in 0..lr {
                    dot += z.get(i, k) * self.routing.get(condition, k);
                }
                *d = self.strength * dot.tanh();
            }
        }
        let sample = DenoiserSample {
            noisy,
            cond,
            target: clean.clone(),
            clean,
            condition,
        };
        Ok((sample, delta))
    }
}

/// A linear map in one of two phases: a raw trainable pair during
/// pretraining, or a frozen base wrapped with a SeLoRA adapter afterwards.
#[derive(Debug)]
enum Slot {
    Raw { w: Parameter, b: Parameter },
    Adapted(SeLoRALinear),
}

/// Tape handles for one registered slot.
#[derive(Debug, Clone, Copy)]
enum RegSlot {
    Raw { w: Var, b: Var },
    Adapted(AdapterVars),
}

#[derive(Debug)]
pub struct DenoiserNet {
    image_dim: usize,
    n_blocks: usize,
    /// Frozen positional encoding added to the input tokens.
    pos: Matrix2D,
    slots: BTreeMap<String, Slot>,
}

impl DenoiserNet {
    /// Build the raw (pre-adaptation) network with freshly drawn weights.
    fn build_raw(spec: &ToyDenoiserSpec) -> Self {
        let mut rng = SeededRng::derive(spec.seed, tags::DEN_WEIGHTS);
        let pos = gaussian(N_TOKENS, spec.image_dim, 1.0, &mut rng);
        let d = spec.image_dim;
        let t = spec.text_dim;
        let h = spec.hidden_dim;
        let mut slots = BTreeMap::new();
        for b in 0..spec.n_attention_blocks {
            let shapes: [(&str, usize, usize); 10] = [
                ("self.q", d, d),
                ("self.k", d, d),
                ("self.v", d, d),
                ("self.out", d, d),
                ("cross.q", d, d),
                ("cross.k", t, d),
                ("cross.v", t, d),
                ("cross.out", d, d),
                ("ffn.up", d, h),
                ("ffn.down", h, d),
            ];
            for (suffix, d_in, d_out) in shapes {
                let id = format!("block{b}.{suffix}");
                let w = Parameter::new(
                    format!("{id}.w"),
                    kaiming_uniform(d_in, d_out, &mut rng),
                    true,
                );
                let bias = Parameter::new(format!("{id}.b"), Matrix2D::zeros(1, d_out), true);
                slots.insert(id, Slot::Raw { w, b: bias });
            }
        }
        DenoiserNet {
            image_dim: spec.image_dim,
            n_blocks: spec.n_attention_blocks,
            pos,
            slots,
        }
    }

    fn register_slots(
        &self,
        tape: &mut Tape,
        overrides: Option<&FactorOverride>,
    ) -> (BTreeMap<String, RegSlot>, TapeBindings) {
        let mut bindings = TapeBindings::default();
        let mut regs = BTreeMap::new();
        for (id, slot) in &self.slots {
            let reg = match slot {
                Slot::Raw { w, b } => RegSlot::Raw {
                    w: tape.leaf(w.value().clone(), w.trainable),
                    b: tape.leaf(b.value().clone(), b.trainable),
                },
                Slot::Adapted(adapter) => {
                    RegSlot::Adapted(bindings.register(tape, adapter, overrides))
                }
            };
            regs.insert(id.clone(), reg);
        }
        (regs, bindings)
    }

    fn linear(
        &self,
        tape: &mut Tape,
        regs: &BTreeMap<String, RegSlot>,
        id: &str,
        x: Var,
    ) -> Result<Var> {
        let slot = self
            .slots
            .get(id)
            .ok_or_else(|| Error::Usage(format!("denoiser: unknown layer '{id}'")))?;
        let reg = regs
            .get(id)
            .ok_or_else(|| Error::Usage(format!("denoiser: layer '{id}' not registered")))?;
        match (slot, reg) {
            (Slot::Raw { .. }, RegSlot::Raw { w, b }) => {
                let xw = tape.matmul(x, *w)?;
                tape.add_row_broadcast(xw, *b)
            }
            (Slot::Adapted(adapter), RegSlot::Adapted(vars)) => {
                adapter.forward_registered(tape, *vars, x)
            }
            _ => Err(Error::Usage(format!(
                "denoiser: registration for '{id}' is out of sync with its slot"
            ))),
        }
    }

    fn attention(
        &self,
        tape: &mut Tape,
        regs: &BTreeMap<String, RegSlot>,
        prefix: &str,
        queries_from: Var,
        kv_from: Var,
        logit_shift: Option<Var>,
    ) -> Result<Var> {
        let q = self.linear(tape, regs, &format!("{prefix}.q"), queries_from)?;
        let k = self.linear(tape, regs, &format!("{prefix}.k"), kv_from)?;
        let v = self.linear(tape, regs, &format!("{prefix}.v"), kv_from)?;
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt)?;
        let mut scaled = tape.scale(scores, 1.0 / (self.image_dim as f64).sqrt());
        if let Some(shift) = logit_shift {
            scaled = tape.add(scaled, shift)?;
        }
        let attn = tape.softmax_rows(scaled);
        let ctx = tape.matmul(attn, v)?;
        self.linear(tape, regs, &format!("{prefix}.out"), ctx)
    }

    /// Record one sample's full forward pass; returns the prediction node.
    /// `delta`, used only during target generation, shifts every block's
    /// cross-attention logit from image token i onto the active condition
    /// token by delta[i] before the softmax.
    fn forward_sample(
        &self,
        tape: &mut Tape,
        regs: &BTreeMap<String, RegSlot>,
        sample: &DenoiserSample,
        delta: Option<&[f64]>,
    ) -> Result<Var> {
        let noisy = tape.leaf(sample.noisy.clone(), false);
        let pos = tape.leaf(self.pos.clone(), false);
        let mut h = tape.add(noisy, pos)?;
        let cond = tape.leaf(sample.cond.clone(), false);
        let shift = match delta {
            Some(d) => {
                let mut m = Matrix2D::zeros(N_TOKENS, 2);
                for (i, v) in d.iter().enumerate() {
                    m.set(i, 0, *v);
                }
                Some(tape.leaf(m, false))
            }
            None => None,
        };
        for b in 0..self.n_blocks {
            let sa = self.attention(tape, regs, &format!("block{b}.self"), h, h, None)?;
            h = tape.add(h, sa)?;
            let ca = self.attention(tape, regs, &format!("block{b}.cross"), h, cond, shift)?;
            h = tape.add(h, ca)?;
            let up = self.linear(tape, regs, &format!("block{b}.ffn.up"), h)?;
            let act = tape.tanh(up);
            let down = self.linear(tape, regs, &format!("block{b}.ffn.down"), act)?;
            h = tape.add(h, down)?;
        }
        Ok(h)
    }

    fn losses_with_regs(
        &self,
        tape: &mut Tape,
        regs: &BTreeMap<String, RegSlot>,
        samples: &[DenoiserSample],
    ) -> Result<Vec<Var>> {
        samples
            .iter()
            .map(|s| {
                let pred = self.forward_sample(tape, regs, s, None)?;
                let target = tape.leaf(s.target.clone(), false);
                tape.mse_loss(pred, target)
            })
            .collect()
    }

    /// Brief unconditional denoising pretraining of the raw network.
    fn pretrain(&mut self, spec: &ToyDenoiserSpec, structure: &TaskStructure) -> Result<()> {
        let mut rng = SeededRng::derive(spec.seed, tags::DEN_PRETRAIN);
        let mut adam = Adam::new(AdamConfig {
            lr: PRETRAIN_LR,
            ..AdamConfig::default()
        });
        for _ in 0..spec.pretrain_steps {
            let batch = (0..PRETRAIN_BATCH)
                .map(|_| structure.draw_sample(&mut rng, false).map(|(s, _)| s))
                .collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let (regs, _bindings) = self.register_slots(&mut tape, None);
            let losses = self.losses_with_regs(&mut tape, &regs, &batch)?;
            let loss = tape.mean_scalars(&losses)?;
            let grads = tape.backward(loss)?;
            drop(tape);

            for slot in self.slots.values_mut() {
                if let Slot::Raw { w, b } = slot {
                    w.zero_grad();
                    b.zero_grad();
                }
            }
            for (id, reg) in &regs {
                if let RegSlot::Raw { w: wv, b: bv } = reg {
                    if let Some(Slot::Raw { w, b }) = self.slots.get_mut(id) {
                        if let Some(gw) = grads.get(*wv) {
                            w.accumulate_grad(gw)?;
                        }
                        if let Some(gb) = grads.get(*bv) {
                            b.accumulate_grad(gb)?;
                        }
                    }
                }
            }
            adam.begin_step();
            for slot in self.slots.values_mut() {
                if let Slot::Raw { w, b } = slot {
                    adam.apply(&mut [w, b])?;
                }
            }
        }
        Ok(())
    }

    /// Freeze every raw pair into a SeLoRA-wrapped base. Adapter init draws
    /// from the INIT stream in sorted layer order.
    fn freeze_and_adapt(
        &mut self,
        mode: &BaselineMode,
        max_rank: Option<usize>,
        seed: u64,
    ) -> Result<()> {
        let mut rng = SeededRng::derive(seed, tags::INIT);
        for (id, slot) in self.slots.iter_mut() {
            let (w, b) = match &*slot {
                Slot::Raw { w, b } => (w.value().clone(), b.value().clone()),
                Slot::Adapted(_) => {
                    return Err(Error::Usage(format!(
                        "denoiser: layer '{id}' is already adapted"
                    )))
                }
            };
            let mut adapter =
                SeLoRALinear::with_rank(id.clone(), w, b, mode.initial_rank(), &mut rng)?;
            if let Some(cap) = max_rank {
                adapter.set_max_rank(cap)?;
            }
            *slot = Slot::Adapted(adapter);
        }
        Ok(())
    }
}

impl AdapterNet for DenoiserNet {
    type Sample = DenoiserSample;

    fn layer_ids(&self) -> Vec<String> {
        self.slots.keys().cloned().collect()
    }

    fn adapter(&self, layer_id: &str) -> Option<&SeLoRALinear> {
        match self.slots.get(layer_id) {
            Some(Slot::Adapted(a)) => Some(a),
            _ => None,
        }
    }

    fn adapter_mut(&mut self, layer_id: &str) -> Option<&mut SeLoRALinear> {
        match self.slots.get_mut(layer_id) {
            Some(Slot::Adapted(a)) => Some(a),
            _ => None,
        }
    }

    fn batch_losses(
        &self,
        tape: &mut Tape,
        samples: &[DenoiserSample],
        overrides: Option<&FactorOverride>,
    ) -> Result<(Vec<Var>, TapeBindings)> {
        let (regs, bindings) = self.register_slots(tape, overrides);
        let losses = self.losses_with_regs(tape, &regs, samples)?;
        Ok((losses, bindings))
    }
}

/// Build the full fine-tuning setup: draw the task, pretrain the raw
/// network, freeze it behind adapters (per `mode`), and sample the
/// conditional dataset. Each sample's target is the clean latents plus the
/// change that sample's cross-attention logit shift induces in the frozen
/// network's output, so the conditional part of the solution is a q/k
/// update and the zero-shift control has zero residual.
pub fn gen_toy_denoiser_task(
    spec: &ToyDenoiserSpec,
    mode: &BaselineMode,
    max_rank: Option<usize>,
) -> Result<(DenoiserNet, Dataset<DenoiserSample>)> {
    spec.validate()?;
    let structure = TaskStructure::draw(spec);
    let mut net = DenoiserNet::build_raw(spec);
    net.pretrain(spec, &structure)?;
    net.freeze_and_adapt(mode, max_rank, spec.seed)?;
    let mut rng = SeededRng::derive(spec.seed, tags::DEN_DATA);
    let gate = if spec.condition_strength > 0.0 { 1.0 } else { 0.0 };
    let mut samples = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let (mut sample, delta) = structure.draw_sample(&mut rng, true)?;
        let mut tape = Tape::new();
        let (regs, _bindings) = net.register_slots(&mut tape, None);
        let perturbed = net.forward_sample(&mut tape, &regs, &sample, Some(&delta))?;
        let plain = net.forward_sample(&mut tape, &regs, &sample, None)?;
        // target = perturbed + gate * (clean - plain): finish the denoising
        // job and add the conditional modulation on top. At gate 0 this is
        // the network's own output and the residual vanishes identically.
        let mut target = tape.value(perturbed).clone();
        let plain = tape.value(plain);
        for i in 0..target.rows() {
            for j in 0..target.cols() {
                let refine = gate * (sample.clean.get(i, j) - plain.get(i, j));
                target.set(i, j, target.get(i, j) + refine);
            }
        }
        sample.target = target;
        samples.push(sample);
    }
    Ok((net, Dataset::split_80_20(samples)))
}
