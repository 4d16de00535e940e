//! Experiment configuration: a single JSON document with `task`, `train`,
//! `policy`, and (for sweeps) `sweep` blocks. Unknown keys are rejected,
//! missing keys take documented defaults, and validation errors name the
//! offending key path. The fully-defaulted form is what `effective_config
//! .json` records, and it re-parses to an identical configuration.

use std::path::Path;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::fisher::{ExpansionPolicy, RatioOrientation};
use crate::harness::train::BaselineMode;

/// Serialize a ratio/threshold: finite values as numbers, +infinity as the
/// string "inf" (JSON has no infinity literal).
pub fn ser_ratio<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if *v == f64::INFINITY {
        s.serialize_str("inf")
    } else {
        Err(serde::ser::Error::custom(format!(
            "cannot serialize non-finite ratio {v}"
        )))
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NumOrInf {
    Num(f64),
    Word(String),
}

fn ratio_from(v: NumOrInf) -> std::result::Result<f64, String> {
    match v {
        NumOrInf::Num(x) => Ok(x),
        NumOrInf::Word(w) if w == "inf" => Ok(f64::INFINITY),
        NumOrInf::Word(w) => Err(format!("expected a number or \"inf\", got \"{w}\"")),
    }
}

pub fn de_ratio<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    ratio_from(NumOrInf::deserialize(d)?).map_err(D::Error::custom)
}

fn ser_ratio_vec<S: Serializer>(vs: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    #[derive(Serialize)]
    struct R(#[serde(serialize_with = "ser_ratio")] f64);
    s.collect_seq(vs.iter().map(|&v| R(v)))
}

fn de_ratio_vec<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    let raw = Vec::<NumOrInf>::deserialize(d)?;
    raw.into_iter()
        .map(|v| ratio_from(v).map_err(D::Error::custom))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    #[serde(default)]
    pub train: TrainBlock,
    #[serde(default)]
    pub policy: PolicyBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskConfig {
    LinearTeacher(LinearTeacherTask),
    ToyDenoiser(ToyDenoiserTask),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearTeacherTask {
    /// Per-head (d_in, d_out); heads share the input vector.
    pub layer_dims: Vec<(usize, usize)>,
    pub true_ranks: Vec<usize>,
    pub noise_std: f64,
    pub n_samples: usize,
}

impl Default for LinearTeacherTask {
    fn default() -> Self {
        // Output widths descend as true rank ascends: a fitted head stops
        // expanding once its accumulated Fisher mass outweighs a fresh
        // column, and narrower outputs keep that crossing near the true rank.
        LinearTeacherTask {
            layer_dims: vec![(48, 96), (48, 32), (48, 10)],
            true_ranks: vec![1, 3, 6],
            noise_std: 0.01,
            n_samples: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDenoiserTask {
    pub image_dim: usize,
    pub text_dim: usize,
    pub hidden_dim: usize,
    pub n_attention_blocks: usize,
    /// Distinct synthetic condition tokens (2..=4).
    pub vocab_size: usize,
    /// 0 turns off all conditional signal (the no-signal control: targets
    /// equal the frozen network's own outputs).
    pub condition_strength: f64,
    pub n_samples: usize,
    pub pretrain_steps: u64,
}

impl Default for ToyDenoiserTask {
    fn default() -> Self {
        ToyDenoiserTask {
            image_dim: 16,
            text_dim: 8,
            hidden_dim: 32,
            n_attention_blocks: 2,
            vocab_size: 2,
            condition_strength: 2.0,
            n_samples: 256,
            pretrain_steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainBlock {
    pub total_steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub baseline_mode: BaselineMode,
    /// Held-out evaluation every this many steps.
    pub eval_interval: u64,
    /// Per-adapter rank cap; `null` means unbounded.
    pub max_rank: Option<usize>,
    /// Selftest hook: make the loss non-finite at this step to exercise the
    /// numerical-abort path.
    pub inject_non_finite_at_step: Option<u64>,
}

impl Default for TrainBlock {
    fn default() -> Self {
        TrainBlock {
            total_steps: 2000,
            batch_size: 8,
            learning_rate: 0.01,
            seed: 1,
            baseline_mode: BaselineMode::Selora,
            eval_interval: 100,
            max_rank: None,
            inject_non_finite_at_step: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyBlock {
    #[serde(serialize_with = "ser_ratio", deserialize_with = "de_ratio")]
    pub lambda: f64,
    pub test_interval: u64,
    pub probe_batch_size: Option<usize>,
    pub ratio_orientation: RatioOrientation,
}

impl Default for PolicyBlock {
    fn default() -> Self {
        PolicyBlock {
            lambda: 1.1,
            test_interval: 40,
            probe_batch_size: None,
            ratio_orientation: RatioOrientation::ExpOverOrig,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    #[serde(serialize_with = "ser_ratio_vec", deserialize_with = "de_ratio_vec")]
    pub lambdas: Vec<f64>,
}

fn cfg_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            cfg_err(&path.display().to_string(), format!("cannot read file: {e}"))
        })?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
            cfg_err(&path.display().to_string(), format!("schema violation: {e}"))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.task {
            TaskConfig::LinearTeacher(t) => {
                if t.layer_dims.is_empty() {
                    return Err(cfg_err("task.linear_teacher.layer_dims", "must be non-empty"));
                }
                if t.layer_dims.len() != t.true_ranks.len() {
                    return Err(cfg_err(
                        "task.linear_teacher.true_ranks",
                        format!(
                            "length {} does not match layer_dims length {}",
                            t.true_ranks.len(),
                            t.layer_dims.len()
                        ),
                    ));
                }
                for (l, (&(d_in, d_out), &r)) in
                    t.layer_dims.iter().zip(&t.true_ranks).enumerate()
                {
                    if d_in == 0 || d_out == 0 {
                        return Err(cfg_err(
                            &format!("task.linear_teacher.layer_dims[{l}]"),
                            "dimensions must be positive",
                        ));
                    }
                    if r > d_in.min(d_out) {
                        return Err(cfg_err(
                            &format!("task.linear_teacher.true_ranks[{l}]"),
                            format!("rank {r} exceeds min(d_in, d_out) = {}", d_in.min(d_out)),
                        ));
                    }
                }
                if !(t.noise_std >= 0.0) || !t.noise_std.is_finite() {
                    return Err(cfg_err(
                        "task.linear_teacher.noise_std",
                        "must be finite and >= 0",
                    ));
                }
                if t.n_samples < 10 {
                    return Err(cfg_err(
                        "task.linear_teacher.n_samples",
                        "must be at least 10 for the 80/20 split",
                    ));
                }
            }
            TaskConfig::ToyDenoiser(t) => {
                for (path, v) in [
                    ("task.toy_denoiser.image_dim", t.image_dim),
                    ("task.toy_denoiser.text_dim", t.text_dim),
                    ("task.toy_denoiser.hidden_dim", t.hidden_dim),
                    ("task.toy_denoiser.n_attention_blocks", t.n_attention_blocks),
                ] {
                    if v == 0 {
                        return Err(cfg_err(path, "must be positive"));
                    }
                }
                if !(2..=4).contains(&t.vocab_size) {
                    return Err(cfg_err("task.toy_denoiser.vocab_size", "must be in 2..=4"));
                }
                if !(1..=4).contains(&t.n_attention_blocks) {
                    return Err(cfg_err(
                        "task.toy_denoiser.n_attention_blocks",
                        "must be in 1..=4",
                    ));
                }
                if !(t.condition_strength >= 0.0) || !t.condition_strength.is_finite() {
                    return Err(cfg_err(
                        "task.toy_denoiser.condition_strength",
                        "must be finite and >= 0",
                    ));
                }
                if t.n_samples < 10 {
                    return Err(cfg_err(
                        "task.toy_denoiser.n_samples",
                        "must be at least 10 for the 80/20 split",
                    ));
                }
            }
        }
        if self.train.total_steps == 0 {
            return Err(cfg_err("train.total_steps", "must be >= 1"));
        }
        if self.train.batch_size == 0 {
            return Err(cfg_err("train.batch_size", "must be >= 1"));
        }
        if !(self.train.learning_rate > 0.0) || !self.train.learning_rate.is_finite() {
            return Err(cfg_err("train.learning_rate", "must be finite and > 0"));
        }
        if self.train.eval_interval == 0 {
            return Err(cfg_err("train.eval_interval", "must be >= 1"));
        }
        if self.train.max_rank == Some(0) {
            return Err(cfg_err("train.max_rank", "must be >= 1 when given"));
        }
        if let BaselineMode::FixedLora { rank } = self.train.baseline_mode {
            if rank == 0 {
                return Err(cfg_err("train.baseline_mode.fixed_lora.rank", "must be >= 1"));
            }
        }
        if !(self.policy.lambda > 0.0) {
            return Err(cfg_err(
                "policy.lambda",
                format!("must be > 0, got {}", self.policy.lambda),
            ));
        }
        if self.policy.test_interval == 0 {
            return Err(cfg_err("policy.test_interval", "must be >= 1"));
        }
        if self.policy.probe_batch_size == Some(0) {
            return Err(cfg_err("policy.probe_batch_size", "must be >= 1 when given"));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.lambdas.is_empty() {
                return Err(cfg_err("sweep.lambdas", "must list at least one lambda"));
            }
            for (i, &l) in sweep.lambdas.iter().enumerate() {
                if !(l > 0.0) {
                    return Err(cfg_err(
                        &format!("sweep.lambdas[{i}]"),
                        format!("must be > 0, got {l}"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn policy(&self) -> ExpansionPolicy {
        ExpansionPolicy {
            lambda: self.policy.lambda,
            test_interval: self.policy.test_interval,
            probe_batch_size: self.policy.probe_batch_size,
        }
    }

    /// Pretty JSON of the fully-defaulted configuration.
    pub fn to_effective_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> &'static str {
        r#"{ "task": { "linear_teacher": {} } }"#
    }

    #[test]
    fn empty_policy_block_takes_paper_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(minimal_json()).unwrap();
        assert_eq!(cfg.policy.lambda, 1.1);
        assert_eq!(cfg.policy.test_interval, 40);
        cfg.validate().unwrap();
    }

    #[test]
    fn zero_lambda_is_rejected_naming_the_field() {
        let json = r#"{ "task": { "linear_teacher": {} }, "policy": { "lambda": 0 } }"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("policy.lambda"), "{err}");
    }

    #[test]
    fn unknown_keys_are_schema_errors() {
        let json = r#"{ "task": { "linear_teacher": {} }, "policy": { "lambd": 1.2 } }"#;
        let err = serde_json::from_str::<ExperimentConfig>(json).unwrap_err();
        assert!(err.to_string().contains("lambd"), "{err}");
    }

    #[test]
    fn effective_config_round_trips_identically() {
        let json = r#"{
            "task": { "toy_denoiser": { "image_dim": 8 } },
            "train": { "total_steps": 100, "baseline_mode": { "fixed_lora": { "rank": 4 } } },
            "policy": { "lambda": "inf" },
            "sweep": { "lambdas": [1.05, "inf"] }
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.policy.lambda, f64::INFINITY);
        assert_eq!(cfg.sweep.as_ref().unwrap().lambdas[1], f64::INFINITY);
        let emitted = cfg.to_effective_json().unwrap();
        let reparsed: ExperimentConfig = serde_json::from_str(&emitted).unwrap();
        assert_eq!(reparsed, cfg);
    }

    #[test]
    fn rank_exceeding_dimension_is_a_spec_error() {
        let json = r#"{ "task": { "linear_teacher": {
            "layer_dims": [[4, 4]], "true_ranks": [5]
        } } }"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("true_ranks[0]"), "{err}");
    }

    #[test]
    fn empty_sweep_list_is_rejected() {
        let json =
            r#"{ "task": { "linear_teacher": {} }, "sweep": { "lambdas": [] } }"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ratio_words_other_than_inf_are_rejected() {
        let json = r#"{ "task": { "linear_teacher": {} }, "policy": { "lambda": "huge" } }"#;
        assert!(serde_json::from_str::<ExperimentConfig>(json).is_err());
    }
}
