//! The training loop: per step one forward/backward/Adam update on the
//! adapter factors, and every `test_interval` steps the Fisher expansion
//! test on the current batch. Fixed-rank baseline runs share every code
//! path except the test, which makes a λ=∞ run bit-identical to fixed
//! rank-1 LoRA under the same seed.

use serde::{Deserialize, Serialize};

use crate::adapter::ExpansionEvent;
use crate::error::{Error, Result};
use crate::fisher::{evaluate_expansions, ExpansionPolicy, RatioOrientation};
use crate::net::{route_gradients, total_trainable_params, zero_all_grads, AdapterNet};
use crate::optim::{Adam, AdamConfig};
use crate::rng::SeededRng;
use crate::tape::Tape;

/// Random streams are split by fixed tags so consuming one (say probe
/// columns) never shifts another (batch order).
pub mod tags {
    pub const DATA: u64 = 1;
    pub const PROBE: u64 = 2;
    pub const INIT: u64 = 3;
    pub const TEACHER: u64 = 4;
    pub const DEN_WEIGHTS: u64 = 5;
    pub const DEN_STRUCT: u64 = 6;
    pub const DEN_PRETRAIN: u64 = 7;
    pub const DEN_DATA: u64 = 8;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    Selora,
    FixedLora { rank: usize },
}

impl BaselineMode {
    /// Starting rank for adapter construction.
    pub fn initial_rank(&self) -> usize {
        match self {
            BaselineMode::Selora => 1,
            BaselineMode::FixedLora { rank } => *rank,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub policy: ExpansionPolicy,
    pub orientation: RatioOrientation,
    pub seed: u64,
    pub baseline_mode: BaselineMode,
    pub eval_interval: u64,
    /// Selftest hook: force a NaN loss at this step.
    pub inject_non_finite_at_step: Option<u64>,
    /// Progress lines on stderr.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 2000,
            batch_size: 8,
            learning_rate: 0.01,
            policy: ExpansionPolicy::default(),
            orientation: RatioOrientation::ExpOverOrig,
            seed: 1,
            baseline_mode: BaselineMode::Selora,
            eval_interval: 100,
            inject_non_finite_at_step: None,
            verbose: false,
        }
    }
}

/// Train/test split of task samples.
#[derive(Debug, Clone)]
pub struct Dataset<S> {
    pub train: Vec<S>,
    pub test: Vec<S>,
}

impl<S> Dataset<S> {
    /// Deterministic 80/20 split in generation order.
    pub fn split_80_20(samples: Vec<S>) -> Self {
        let cut = (samples.len() * 4) / 5;
        let mut samples = samples;
        let test = samples.split_off(cut);
        Dataset {
            train: samples,
            test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPoint {
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankPoint {
    pub step: u64,
    pub layer_id: String,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerInfo {
    pub layer_id: String,
    pub d_in: usize,
    pub d_out: usize,
    pub final_rank: usize,
}

/// Everything one run produced. Serialized as `run.json`; wall time is
/// in-memory only so reruns of the same config emit identical bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub loss_curve: Vec<f64>,
    pub eval_losses: Vec<EvalPoint>,
    pub rank_trajectory: Vec<RankPoint>,
    pub expansion_events: Vec<ExpansionEvent>,
    pub layers: Vec<LayerInfo>,
    pub final_param_count: usize,
    #[serde(skip)]
    pub wall_time_seconds: f64,
}

/// Equality covers recorded results only; wall time is a diagnostic.
impl PartialEq for RunReport {
    fn eq(&self, other: &Self) -> bool {
        self.loss_curve == other.loss_curve
            && self.eval_losses == other.eval_losses
            && self.rank_trajectory == other.rank_trajectory
            && self.expansion_events == other.expansion_events
            && self.layers == other.layers
            && self.final_param_count == other.final_param_count
    }
}

impl RunReport {
    pub fn final_eval_loss(&self) -> Option<f64> {
        self.eval_losses.last().map(|e| e.loss)
    }

    pub fn total_final_rank(&self) -> usize {
        self.layers.iter().map(|l| l.final_rank).sum()
    }
}

/// One row of the per-layer allocation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankReportRow {
    pub layer_id: String,
    pub final_rank: usize,
    pub param_count: usize,
    pub share: f64,
}

/// Per-layer final ranks, parameter counts, and shares, sorted by layer id.
/// Shares sum to 1 up to rounding.
pub fn rank_report(report: &RunReport) -> Vec<RankReportRow> {
    let mut rows: Vec<RankReportRow> = report
        .layers
        .iter()
        .map(|l| RankReportRow {
            layer_id: l.layer_id.clone(),
            final_rank: l.final_rank,
            param_count: l.final_rank * (l.d_in + l.d_out),
            share: 0.0,
        })
        .collect();
    rows.sort_by(|a, b| a.layer_id.cmp(&b.layer_id));
    let total: usize = rows.iter().map(|r| r.param_count).sum();
    if total > 0 {
        for r in &mut rows {
            r.share = r.param_count as f64 / total as f64;
        }
    }
    rows
}

fn record_ranks<N: AdapterNet>(net: &N, step: u64, out: &mut Vec<RankPoint>) {
    for layer_id in net.layer_ids() {
        if let Some(a) = net.adapter(&layer_id) {
            out.push(RankPoint {
                step,
                layer_id,
                rank: a.rank(),
            });
        }
    }
}

/// Mean per-sample loss over a sample set, no gradients.
pub fn evaluate<N: AdapterNet>(net: &N, samples: &[N::Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Usage("evaluate over an empty sample set".into()));
    }
    let mut tape = Tape::new();
    let (losses, _) = net.batch_losses(&mut tape, samples, None)?;
    let mean = tape.mean_scalars(&losses)?;
    Ok(tape.scalar_value(mean))
}

/// Execute the training procedure on an already-built net.
pub fn train<N: AdapterNet>(
    net: &mut N,
    data: &Dataset<N::Sample>,
    cfg: &TrainConfig,
) -> Result<RunReport>
where
    N::Sample: Clone,
{
    cfg.policy.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Usage(
            "train requires non-empty train and test splits".into(),
        ));
    }
    let started = std::time::Instant::now();
    let mut data_rng = SeededRng::derive(cfg.seed, tags::DATA);
    let mut probe_rng = SeededRng::derive(cfg.seed, tags::PROBE);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    });

    let mut report = RunReport {
        loss_curve: Vec::with_capacity(cfg.total_steps as usize),
        eval_losses: Vec::new(),
        rank_trajectory: Vec::new(),
        expansion_events: Vec::new(),
        layers: Vec::new(),
        final_param_count: 0,
        wall_time_seconds: 0.0,
    };
    record_ranks(net, 0, &mut report.rank_trajectory);

    let layer_ids = net.layer_ids();
    for step in 1..=cfg.total_steps {
        let batch: Vec<N::Sample> = (0..cfg.batch_size)
            .map(|_| data.train[data_rng.below(data.train.len())].clone())
            .collect();

        let mut tape = Tape::new();
        let (losses, bindings) = net.batch_losses(&mut tape, &batch, None)?;
        let mean = tape.mean_scalars(&losses)?;
        let mut loss = tape.scalar_value(mean);
        if cfg.inject_non_finite_at_step == Some(step) {
            loss = f64::NAN;
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                details: "training loss left the finite range".into(),
            });
        }
        report.loss_curve.push(loss);

        zero_all_grads(net);
        let grads = tape.backward(mean)?;
        route_gradients(net, &bindings, &grads)?;
        drop(tape);

        adam.begin_step();
        for id in &layer_ids {
            let adapter = net
                .adapter_mut(id)
                .ok_or_else(|| Error::Usage(format!("train: unknown layer '{id}'")))?;
            adam.apply(&mut adapter.trainable_params_mut())?;
        }

        if step % cfg.policy.test_interval == 0 {
            if cfg.baseline_mode == BaselineMode::Selora {
                // A probe batch larger than the step batch is drawn from the
                // train split on the probe stream; smaller requests are a
                // prefix of the step batch (handled by evaluate_expansions).
                let probe_batch: Vec<N::Sample> = match cfg.policy.probe_batch_size {
                    Some(n) if n > batch.len() && !cfg.policy.lambda.is_infinite() => (0..n)
                        .map(|_| data.train[probe_rng.below(data.train.len())].clone())
                        .collect(),
                    _ => Vec::new(),
                };
                let probe_samples: &[N::Sample] = if probe_batch.is_empty() {
                    &batch
                } else {
                    &probe_batch
                };
                let test = evaluate_expansions(
                    net,
                    probe_samples,
                    &cfg.policy,
                    cfg.orientation,
                    &mut probe_rng,
                    step,
                )?;
                if cfg.verbose && !test.capped.is_empty() {
                    eprintln!(
                        "step {step}: expansion skipped at rank cap for {}",
                        test.capped.join(", ")
                    );
                }
                report.expansion_events.extend(test.events);
            }
            record_ranks(net, step, &mut report.rank_trajectory);
        }

        if step % cfg.eval_interval == 0 || step == cfg.total_steps {
            let eval = evaluate(net, &data.test)?;
            report.eval_losses.push(EvalPoint { step, loss: eval });
            if cfg.verbose {
                eprintln!("step {step}: train loss {loss:.6}, eval loss {eval:.6}");
            }
        }
    }

    for layer_id in &layer_ids {
        let a = net
            .adapter(layer_id)
            .ok_or_else(|| Error::Usage(format!("train: unknown layer '{layer_id}'")))?;
        report.layers.push(LayerInfo {
            layer_id: layer_id.clone(),
            d_in: a.d_in(),
            d_out: a.d_out(),
            final_rank: a.rank(),
        });
    }
    report.final_param_count = total_trainable_params(net);
    report.wall_time_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

/// One training run per λ over freshly built nets sharing data and seed.
/// The factory returns the net and dataset for one run; it is called once
/// per λ so runs stay independent.
pub fn lambda_sweep<N, F>(
    factory: F,
    base: &TrainConfig,
    lambdas: &[f64],
) -> Result<Vec<(f64, RunReport)>>
where
    N: AdapterNet,
    N::Sample: Clone,
    F: Fn() -> Result<(N, Dataset<N::Sample>)>,
{
    if lambdas.is_empty() {
        return Err(Error::Usage("lambda_sweep needs at least one lambda".into()));
    }
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let (mut net, data) = factory()?;
        let mut cfg = base.clone();
        cfg.policy.lambda = lambda;
        let report = train(&mut net, &data, &cfg)?;
        out.push((lambda, report));
    }
    Ok(out)
}
