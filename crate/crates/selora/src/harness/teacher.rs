//! Teacher–student rank recovery. Each head l is an independent linear map
//! on a shared Gaussian input; the teacher for head l is `W0_l + U_l V_l`
//! with exactly `true_ranks[l]` factor columns, so the per-layer update rank
//! is known ground truth. A student of SeLoRA-wrapped copies of the frozen
//! bases then has a measurable target: its final per-head ranks should order
//! like the true ranks.
//!
//! Heads are parallel rather than chained on purpose: composition would let
//! rank migrate between layers and make "the true rank of layer l" an
//! ill-posed quantity.

use std::collections::BTreeMap;

use crate::adapter::SeLoRALinear;
use crate::error::{Error, Result};
use crate::harness::train::{tags, BaselineMode, Dataset};
use crate::init::{gaussian, kaiming_uniform};
use crate::matrix::Matrix2D;
use crate::net::{AdapterNet, FactorOverride, TapeBindings};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct LinearTeacherSpec {
    pub layer_dims: Vec<(usize, usize)>,
    pub true_ranks: Vec<usize>,
    pub noise_std: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl LinearTeacherSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.is_empty() || self.layer_dims.len() != self.true_ranks.len() {
            return Err(Error::InvalidDimension(
                "teacher spec: layer_dims and true_ranks must be equal-length and non-empty"
                    .into(),
            ));
        }
        for (l, (&(d_in, d_out), &r)) in self.layer_dims.iter().zip(&self.true_ranks).enumerate()
        {
            if d_in == 0 || d_out == 0 {
                return Err(Error::InvalidDimension(format!(
                    "teacher spec: layer {l} has a zero dimension"
                )));
            }
            if r > d_in.min(d_out) {
                return Err(Error::InvalidDimension(format!(
                    "teacher spec: layer {l} rank {r} exceeds min(d_in, d_out) = {}",
                    d_in.min(d_out)
                )));
            }
        }
        if self.n_samples < 10 {
            return Err(Error::InvalidDimension(
                "teacher spec: n_samples must be at least 10".into(),
            ));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::InvalidDimension(
                "teacher spec: noise_std must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// All heads read the same input, so they must agree on d_in.
    pub fn d_in(&self) -> usize {
        self.layer_dims[0].0
    }
}

/// One example: a shared input row and one target row per head.
#[derive(Debug, Clone)]
pub struct TeacherSample {
    pub x: Matrix2D,
    pub ys: Vec<Matrix2D>,
}

/// Generated task: frozen bases, the teacher maps, and the sampled dataset.
#[derive(Debug, Clone)]
pub struct LinearTeacher {
    pub spec: LinearTeacherSpec,
    /// Per head: frozen (W0, b0).
    pub base: Vec<(Matrix2D, Matrix2D)>,
    /// Per head: W0 + U V at the specified true rank.
    pub teacher: Vec<Matrix2D>,
    pub dataset: Dataset<TeacherSample>,
}

pub fn layer_name(l: usize) -> String {
    format!("head.{l:02}")
}

/// Draw bases, teacher deltas, and the dataset. Everything is a pure
/// function of the spec (including its seed).
pub fn gen_linear_teacher(spec: &LinearTeacherSpec) -> Result<LinearTeacher> {
    spec.validate()?;
    let d_in = spec.d_in();
    for (l, &(di, _)) in spec.layer_dims.iter().enumerate() {
        if di != d_in {
            return Err(Error::InvalidDimension(format!(
                "teacher spec: head {l} d_in {di} differs from shared input dim {d_in}"
            )));
        }
    }
    let mut rng = SeededRng::derive(spec.seed, tags::TEACHER);
    let mut base = Vec::new();
    let mut teacher = Vec::new();
    for (&(d_in, d_out), &r) in spec.layer_dims.iter().zip(&spec.true_ranks) {
        let w0 = kaiming_uniform(d_in, d_out, &mut rng);
        let delta = if r == 0 {
            Matrix2D::zeros(d_in, d_out)
        } else {
            // Unit-scale factors: the update is clearly above the noise
            // floor without swamping the base map.
            let u = gaussian(d_in, r, 1.0, &mut rng);
            let v = gaussian(r, d_out, 1.0, &mut rng);
            u.matmul(&v)?
        };
        teacher.push(w0.add(&delta)?);
        base.push((w0, Matrix2D::zeros(1, d_out)));
    }

    let mut samples = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let x = gaussian(1, d_in, 1.0, &mut rng);
        let ys = teacher
            .iter()
            .map(|t| {
                let clean = x.matmul(t)?;
                if spec.noise_std > 0.0 {
                    clean.add(&gaussian(1, t.cols(), spec.noise_std, &mut rng))
                } else {
                    Ok(clean)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(TeacherSample { x, ys });
    }
    Ok(LinearTeacher {
        spec: spec.clone(),
        base,
        teacher,
        dataset: Dataset::split_80_20(samples),
    })
}

/// Student: one SeLoRA adapter per head over the frozen teacher bases.
#[derive(Debug)]
pub struct LinearHeadsNet {
    heads: BTreeMap<String, SeLoRALinear>,
}

impl LinearHeadsNet {
    /// Build the student. Adapter initialization draws from the INIT stream
    /// of `seed` in head order, so fixed-rank-1 and SeLoRA students are
    /// bit-identical at construction.
    pub fn build(
        task: &LinearTeacher,
        mode: &BaselineMode,
        max_rank: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = SeededRng::derive(seed, tags::INIT);
        let mut heads = BTreeMap::new();
        for (l, (w0, b0)) in task.base.iter().enumerate() {
            let mut adapter = SeLoRALinear::with_rank(
                layer_name(l),
                w0.clone(),
                b0.clone(),
                mode.initial_rank(),
                &mut rng,
            )?;
            if let Some(cap) = max_rank {
                adapter.set_max_rank(cap)?;
            }
            heads.insert(adapter.layer_id.clone(), adapter);
        }
        Ok(LinearHeadsNet { heads })
    }
}

impl AdapterNet for LinearHeadsNet {
    type Sample = TeacherSample;

    fn layer_ids(&self) -> Vec<String> {
        self.heads.keys().cloned().collect()
    }

    fn adapter(&self, layer_id: &str) -> Option<&SeLoRALinear> {
        self.heads.get(layer_id)
    }

    fn adapter_mut(&mut self, layer_id: &str) -> Option<&mut SeLoRALinear> {
        self.heads.get_mut(layer_id)
    }

    fn batch_losses(
        &self,
        tape: &mut Tape,
        samples: &[TeacherSample],
        overrides: Option<&FactorOverride>,
    ) -> Result<(Vec<Var>, TapeBindings)> {
        let mut bindings = TapeBindings::default();
        let head_vars: Vec<_> = self
            .heads
            .values()
            .map(|a| bindings.register(tape, a, overrides))
            .collect();
        let mut losses = Vec::with_capacity(samples.len());
        for s in samples {
            if s.ys.len() != self.heads.len() {
                return Err(Error::Usage(format!(
                    "teacher sample has {} targets for {} heads",
                    s.ys.len(),
                    self.heads.len()
                )));
            }
            let x = tape.leaf(s.x.clone(), false);
            let mut head_losses = Vec::with_capacity(self.heads.len());
            for (adapter, (vars, y)) in self.heads.values().zip(head_vars.iter().zip(&s.ys)) {
                let pred = adapter.forward_registered(tape, *vars, x)?;
                let target = tape.leaf(y.clone(), false);
                head_losses.push(tape.mse_loss(pred, target)?);
            }
            losses.push(tape.mean_scalars(&head_losses)?);
        }
        Ok((losses, bindings))
    }
}
