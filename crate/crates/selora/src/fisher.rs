//! Empirical Fisher information and the expansion decision.
//!
//! Per-sample loss gradients are squared and batch-averaged into a
//! `FisherEstimate` per adapter. Summing the estimate gives the FI-Score;
//! probing a hypothetical one-rank expansion on the same batch gives the
//! FI-Ratio; every `test_interval` steps, adapters whose ratio clears the
//! threshold expand, installing the exact column that was probed.
//!
//! None of the measurement paths mutate the model: probes run on tape
//! copies, and gradients live in the tape's result map, never in the
//! parameters.

use std::collections::BTreeMap;

use crate::adapter::ExpansionEvent;
use crate::error::{Error, Result};
use crate::matrix::Matrix2D;
use crate::net::{AdapterNet, FactorOverride};
use crate::tape::Tape;

/// Per-entry empirical Fisher values for one adapter's factors.
#[derive(Debug, Clone)]
pub struct FisherEstimate {
    pub layer_id: String,
    pub fisher_a: Matrix2D,
    pub fisher_b: Matrix2D,
    pub batch_size: usize,
}

/// When and how eagerly to expand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpansionPolicy {
    /// Acceptance threshold λ. `f64::INFINITY` is the never-expand sentinel.
    pub lambda: f64,
    /// Steps between expansion tests (t).
    pub test_interval: u64,
    /// Number of samples the probe sees. `None` means the whole step batch;
    /// values above the step batch size make the trainer draw a dedicated
    /// probe batch from the train split, stabilizing the Fisher estimate.
    pub probe_batch_size: Option<usize>,
}

impl Default for ExpansionPolicy {
    fn default() -> Self {
        ExpansionPolicy {
            lambda: 1.1,
            test_interval: 40,
            probe_batch_size: None,
        }
    }
}

impl ExpansionPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config {
                path: "policy.lambda".into(),
                message: format!("must be > 0, got {}", self.lambda),
            });
        }
        if self.test_interval < 1 {
            return Err(Error::Config {
                path: "policy.test_interval".into(),
                message: "must be >= 1".into(),
            });
        }
        if self.probe_batch_size == Some(0) {
            return Err(Error::Config {
                path: "policy.probe_batch_size".into(),
                message: "must be >= 1 when given".into(),
            });
        }
        Ok(())
    }
}

/// Which way the FI-Ratio divides. The written formula in the source
/// material reads original/expanded, but that quantity never exceeds 1, so
/// the operative default is expanded/original; the literal form stays
/// available for audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioOrientation {
    #[default]
    ExpOverOrig,
    PaperLiteral,
}

impl RatioOrientation {
    /// Ratio with the degenerate-score conventions: both scores zero → 1
    /// (no information either way); a zero denominator with a positive
    /// numerator → +inf.
    pub fn apply(self, orig_score: f64, exp_score: f64) -> f64 {
        let (num, den) = match self {
            RatioOrientation::ExpOverOrig => (exp_score, orig_score),
            RatioOrientation::PaperLiteral => (orig_score, exp_score),
        };
        if num == 0.0 && den == 0.0 {
            1.0
        } else if den == 0.0 {
            f64::INFINITY
        } else {
            num / den
        }
    }
}

/// Empirical Fisher for every adapter over one batch: one forward recording,
/// one backward per sample, squares averaged over the batch. `overrides`
/// substitutes factors for at most one layer (the probe path).
pub fn empirical_fisher_all<N: AdapterNet>(
    net: &N,
    samples: &[N::Sample],
    overrides: Option<&FactorOverride>,
) -> Result<BTreeMap<String, FisherEstimate>> {
    if samples.is_empty() {
        return Err(Error::Usage("empirical_fisher over an empty batch".into()));
    }
    let mut tape = Tape::new();
    let (losses, bindings) = net.batch_losses(&mut tape, samples, overrides)?;
    let mut out: BTreeMap<String, FisherEstimate> = BTreeMap::new();
    for (layer_id, vars) in bindings.iter() {
        let (ar, ac) = tape.value(vars.a).shape();
        let (br, bc) = tape.value(vars.b).shape();
        out.insert(
            layer_id.clone(),
            FisherEstimate {
                layer_id: layer_id.clone(),
                fisher_a: Matrix2D::zeros(ar, ac),
                fisher_b: Matrix2D::zeros(br, bc),
                batch_size: samples.len(),
            },
        );
    }
    for &loss in &losses {
        let grads = tape.backward(loss)?;
        for (layer_id, vars) in bindings.iter() {
            let est = out.get_mut(layer_id).expect("inserted above");
            if let Some(da) = grads.get(vars.a) {
                for (acc, &g) in est.fisher_a.data_mut().iter_mut().zip(da.data()) {
                    *acc += g * g;
                }
            }
            if let Some(db) = grads.get(vars.b) {
                for (acc, &g) in est.fisher_b.data_mut().iter_mut().zip(db.data()) {
                    *acc += g * g;
                }
            }
        }
    }
    let inv = 1.0 / samples.len() as f64;
    for est in out.values_mut() {
        est.fisher_a = est.fisher_a.scale(inv);
        est.fisher_b = est.fisher_b.scale(inv);
    }
    Ok(out)
}

/// Empirical Fisher for one adapter.
pub fn empirical_fisher<N: AdapterNet>(
    net: &N,
    layer_id: &str,
    samples: &[N::Sample],
) -> Result<FisherEstimate> {
    empirical_fisher_all(net, samples, None)?
        .remove(layer_id)
        .ok_or_else(|| Error::Usage(format!("empirical_fisher: unknown layer '{layer_id}'")))
}

/// FI-Score: the double sum of Fisher values over every entry of A and B.
pub fn fi_score(est: &FisherEstimate) -> f64 {
    est.fisher_a.sum() + est.fisher_b.sum()
}

/// Everything one probe measured: the candidate column, both scores, and
/// the oriented ratio.
#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub layer_id: String,
    pub k: Matrix2D,
    pub orig_score: f64,
    pub exp_score: f64,
    pub ratio: f64,
}

/// Probe one layer's hypothetical expansion given its already-measured
/// original score.
fn probe_layer<N: AdapterNet>(
    net: &N,
    layer_id: &str,
    samples: &[N::Sample],
    orig_score: f64,
    orientation: RatioOrientation,
    k: Matrix2D,
) -> Result<ProbeOutcome> {
    let adapter = net
        .adapter(layer_id)
        .ok_or_else(|| Error::Usage(format!("fi_ratio: unknown layer '{layer_id}'")))?;
    let (a_exp, b_exp) = adapter.expanded_factors(&k)?;
    let overrides = FactorOverride {
        layer_id: layer_id.to_string(),
        a: a_exp,
        b: b_exp,
    };
    let exp_est = empirical_fisher_all(net, samples, Some(&overrides))?
        .remove(layer_id)
        .expect("probed layer is registered");
    let exp_score = fi_score(&exp_est);
    Ok(ProbeOutcome {
        layer_id: layer_id.to_string(),
        k,
        orig_score,
        exp_score,
        ratio: orientation.apply(orig_score, exp_score),
    })
}

/// FI-Ratio for one adapter over one batch. Draws the candidate Kaiming
/// column from `rng`, measures both scores on the same batch, and leaves the
/// adapter untouched. The returned outcome carries the probed column so an
/// accepting caller can install that exact column.
pub fn fi_ratio<N: AdapterNet>(
    net: &N,
    layer_id: &str,
    samples: &[N::Sample],
    orientation: RatioOrientation,
    rng: &mut crate::rng::SeededRng,
) -> Result<ProbeOutcome> {
    let adapter = net
        .adapter(layer_id)
        .ok_or_else(|| Error::Usage(format!("fi_ratio: unknown layer '{layer_id}'")))?;
    let orig = empirical_fisher(net, layer_id, samples)?;
    let k = adapter.draw_expansion_column(rng);
    probe_layer(net, layer_id, samples, fi_score(&orig), orientation, k)
}

/// Result of one scheduled expansion test over the whole model.
#[derive(Debug, Default)]
pub struct ExpansionTest {
    /// Accepted expansions, already applied, in layer order.
    pub events: Vec<ExpansionEvent>,
    /// Layers skipped because they sit at their rank cap.
    pub capped: Vec<String>,
}

/// Algorithm 1's periodic test: a no-op unless `step` is a positive multiple
/// of the test interval; otherwise probes every adapter independently (all
/// others unexpanded, deterministic layer order) and expands those whose
/// ratio meets λ, installing the probed column bit-identically. λ = ∞ skips
/// the probes entirely, so such a run consumes no probe randomness and does
/// no Fisher work.
pub fn evaluate_expansions<N: AdapterNet>(
    net: &mut N,
    samples: &[N::Sample],
    policy: &ExpansionPolicy,
    orientation: RatioOrientation,
    rng: &mut crate::rng::SeededRng,
    step: u64,
) -> Result<ExpansionTest> {
    let mut test = ExpansionTest::default();
    if step == 0 || step % policy.test_interval != 0 {
        return Ok(test);
    }
    if policy.lambda == f64::INFINITY {
        return Ok(test);
    }
    if samples.is_empty() {
        return Err(Error::Usage("expansion test over an empty batch".into()));
    }
    let probe_n = policy
        .probe_batch_size
        .unwrap_or(samples.len())
        .min(samples.len());
    let probe_samples = &samples[..probe_n];

    let orig_all = empirical_fisher_all(net, probe_samples, None)?;
    let mut accepted: Vec<ProbeOutcome> = Vec::new();
    for layer_id in net.layer_ids() {
        let adapter = net
            .adapter(&layer_id)
            .ok_or_else(|| Error::Usage(format!("expansion test: unknown layer '{layer_id}'")))?;
        if adapter.rank() >= adapter.max_rank() {
            test.capped.push(layer_id.clone());
            continue;
        }
        let orig_score = fi_score(&orig_all[&layer_id]);
        let k = adapter.draw_expansion_column(rng);
        let outcome = probe_layer(net, &layer_id, probe_samples, orig_score, orientation, k)?;
        if outcome.ratio >= policy.lambda {
            accepted.push(outcome);
        }
    }
    for outcome in accepted {
        let adapter = net
            .adapter_mut(&outcome.layer_id)
            .expect("probed layers exist");
        let old_rank = adapter.rank();
        adapter.expand_with_column(&outcome.k)?;
        test.events.push(ExpansionEvent {
            layer_id: outcome.layer_id,
            step,
            old_rank,
            new_rank: old_rank + 1,
            fi_ratio: outcome.ratio,
        });
    }
    Ok(test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::SeLoRALinear;
    use crate::net::TapeBindings;
    use crate::rng::SeededRng;
    use crate::tape::Var;

    /// One adapted linear layer; samples are (x row, y row) pairs scored by
    /// MSE.
    struct OneLayer {
        adapter: SeLoRALinear,
    }

    impl AdapterNet for OneLayer {
        type Sample = (Matrix2D, Matrix2D);

        fn layer_ids(&self) -> Vec<String> {
            vec![self.adapter.layer_id.clone()]
        }

        fn adapter(&self, layer_id: &str) -> Option<&SeLoRALinear> {
            (layer_id == self.adapter.layer_id).then_some(&self.adapter)
        }

        fn adapter_mut(&mut self, layer_id: &str) -> Option<&mut SeLoRALinear> {
            (layer_id == self.adapter.layer_id).then(|| &mut self.adapter)
        }

        fn batch_losses(
            &self,
            tape: &mut Tape,
            samples: &[Self::Sample],
            overrides: Option<&FactorOverride>,
        ) -> Result<(Vec<Var>, TapeBindings)> {
            let mut bindings = TapeBindings::default();
            let vars = bindings.register(tape, &self.adapter, overrides);
            let mut losses = Vec::with_capacity(samples.len());
            for (x, y) in samples {
                let xv = tape.leaf(x.clone(), false);
                let yv = tape.leaf(y.clone(), false);
                let pred = self.adapter.forward_registered(tape, vars, xv)?;
                losses.push(tape.mse_loss(pred, yv)?);
            }
            Ok((losses, bindings))
        }
    }

    /// f(x) = x * (0 + A B) with A=[[1]], B=[[2]]: effectively f = 2x.
    fn scalar_net() -> OneLayer {
        let mut rng = SeededRng::new(5);
        let mut adapter = SeLoRALinear::new(
            "scalar",
            Matrix2D::zeros(1, 1),
            Matrix2D::zeros(1, 1),
            &mut rng,
        )
        .unwrap();
        *adapter.trainable_params_mut()[0].value_mut().unwrap() =
            Matrix2D::from_vec(1, 1, vec![1.0]).unwrap();
        *adapter.trainable_params_mut()[1].value_mut().unwrap() =
            Matrix2D::from_vec(1, 1, vec![2.0]).unwrap();
        OneLayer { adapter }
    }

    fn sample(x: f64, y: f64) -> (Matrix2D, Matrix2D) {
        (
            Matrix2D::from_vec(1, 1, vec![x]).unwrap(),
            Matrix2D::from_vec(1, 1, vec![y]).unwrap(),
        )
    }

    #[test]
    fn scalar_fisher_matches_analytic_value() {
        // L = (2x - y)^2 at (x=1, y=0): dL/dB = 2(f-y) xA = 4, squared 16;
        // dL/dA = 2(f-y) xB = 8, squared 64.
        let net = scalar_net();
        let est = empirical_fisher(&net, "scalar", &[sample(1.0, 0.0)]).unwrap();
        assert!((est.fisher_b.get(0, 0) - 16.0).abs() < 1e-10);
        assert!((est.fisher_a.get(0, 0) - 64.0).abs() < 1e-10);

        // Finite-difference oracle on the B entry.
        let fd = {
            let h = 1e-5;
            let eval = |b: f64| {
                let f = 1.0 * 1.0 * b;
                (f - 0.0_f64).powi(2)
            };
            (eval(2.0 + h) - eval(2.0 - h)) / (2.0 * h)
        };
        assert!((fd * fd - est.fisher_b.get(0, 0)).abs() / 16.0 < 1e-4);
    }

    #[test]
    fn zero_inputs_give_zero_estimate() {
        let net = scalar_net();
        let est = empirical_fisher(&net, "scalar", &[sample(0.0, 0.0)]).unwrap();
        assert_eq!(fi_score(&est), 0.0);
    }

    #[test]
    fn duplicate_samples_average_to_single_sample_estimate() {
        let net = scalar_net();
        let one = empirical_fisher(&net, "scalar", &[sample(1.0, 0.0)]).unwrap();
        let two =
            empirical_fisher(&net, "scalar", &[sample(1.0, 0.0), sample(1.0, 0.0)]).unwrap();
        assert_eq!(fi_score(&one), fi_score(&two));
    }

    #[test]
    fn empty_batch_is_a_usage_error() {
        let net = scalar_net();
        assert!(empirical_fisher(&net, "scalar", &[]).is_err());
    }

    #[test]
    fn fisher_leaves_the_model_untouched() {
        let net = scalar_net();
        let a_before = net.adapter.a().value().clone();
        let grad_before = net.adapter.a().grad().clone();
        let _ = empirical_fisher(&net, "scalar", &[sample(1.5, -0.5)]).unwrap();
        let _ = fi_ratio(
            &net,
            "scalar",
            &[sample(1.5, -0.5)],
            RatioOrientation::ExpOverOrig,
            &mut SeededRng::new(3),
        )
        .unwrap();
        assert_eq!(net.adapter.a().value(), &a_before);
        assert_eq!(net.adapter.a().grad(), &grad_before);
        assert_eq!(net.adapter.rank(), 1);
    }

    #[test]
    fn fi_score_is_plain_summation() {
        let est = FisherEstimate {
            layer_id: "l".into(),
            fisher_a: Matrix2D::from_rows(&[vec![1.0, 2.0]]).unwrap(),
            fisher_b: Matrix2D::from_rows(&[vec![3.0], vec![4.0]]).unwrap(),
            batch_size: 1,
        };
        assert_eq!(fi_score(&est), 10.0);

        // Brute-force loop oracle.
        let mut total = 0.0;
        for &v in est.fisher_a.data() {
            total += v;
        }
        for &v in est.fisher_b.data() {
            total += v;
        }
        assert_eq!(fi_score(&est), total);
    }

    #[test]
    fn ratio_conventions() {
        let o = RatioOrientation::ExpOverOrig;
        assert_eq!(o.apply(0.0, 0.0), 1.0);
        assert_eq!(o.apply(0.0, 2.0), f64::INFINITY);
        assert_eq!(o.apply(2.0, 3.0), 1.5);
        let p = RatioOrientation::PaperLiteral;
        assert_eq!(p.apply(0.0, 0.0), 1.0);
        assert_eq!(p.apply(2.0, 0.0), f64::INFINITY);
        assert_eq!(p.apply(2.0, 4.0), 0.5);
    }

    #[test]
    fn ratio_at_least_one_and_k_grad_zero() {
        let mut rng = SeededRng::new(77);
        for trial in 0..25 {
            let d_in = 1 + (rng.below(5) as usize);
            let d_out = 1 + (rng.below(5) as usize);
            let w0 = crate::init::gaussian(d_in, d_out, 1.0, &mut rng);
            let b0 = Matrix2D::zeros(1, d_out);
            let mut adapter = SeLoRALinear::new(format!("l{trial}"), w0, b0, &mut rng).unwrap();
            // Give B nonzero entries so the original score is positive.
            for j in 0..d_out {
                let v = rng.uniform(-0.5, 0.5);
                adapter.trainable_params_mut()[1]
                    .value_mut()
                    .unwrap()
                    .set(0, j, v);
            }
            let net = OneLayer { adapter };
            let samples: Vec<_> = (0..3)
                .map(|_| {
                    (
                        crate::init::gaussian(1, d_in, 1.0, &mut rng),
                        crate::init::gaussian(1, d_out, 1.0, &mut rng),
                    )
                })
                .collect();
            let outcome = fi_ratio(
                &net,
                &net.layer_ids()[0],
                &samples,
                RatioOrientation::ExpOverOrig,
                &mut rng,
            )
            .unwrap();
            assert!(
                outcome.ratio >= 1.0,
                "trial {trial}: ratio {} below 1",
                outcome.ratio
            );

            // The probed K never receives gradient: expanded score equals
            // original plus the new B row's contribution only, so the A-part
            // of the expanded estimate has an all-zero last column.
            let adapter = net.adapter(&net.layer_ids()[0]).unwrap();
            let (a_exp, b_exp) = adapter.expanded_factors(&outcome.k).unwrap();
            let overrides = FactorOverride {
                layer_id: net.layer_ids()[0].clone(),
                a: a_exp,
                b: b_exp,
            };
            let est = empirical_fisher_all(&net, &samples, Some(&overrides))
                .unwrap()
                .remove(&net.layer_ids()[0])
                .unwrap();
            let new_col = est.fisher_a.cols() - 1;
            for i in 0..est.fisher_a.rows() {
                assert_eq!(est.fisher_a.get(i, new_col), 0.0);
            }
        }
    }

    #[test]
    fn scalar_ratio_matches_brute_force() {
        // Orig: dA=8 -> 64, dB=4 -> 16, score 80. Expanded adds dB_new =
        // 2(f-y) xK with unchanged f, so exp score = 80 + (4K)^2.
        let net = scalar_net();
        let batch = [sample(1.0, 0.0)];
        let outcome = fi_ratio(
            &net,
            "scalar",
            &batch,
            RatioOrientation::ExpOverOrig,
            &mut SeededRng::new(11),
        )
        .unwrap();
        let k = outcome.k.get(0, 0);
        let expected = (80.0 + (4.0 * k).powi(2)) / 80.0;
        assert!((outcome.ratio - expected).abs() < 1e-10);
    }

    #[test]
    fn expansion_test_respects_interval_and_lambda() {
        let mut net = scalar_net();
        net.adapter_mut("scalar").unwrap().set_max_rank(1).unwrap();
        let batch = vec![sample(1.0, 0.0)];
        let policy = ExpansionPolicy {
            lambda: 1.0,
            test_interval: 10,
            probe_batch_size: None,
        };
        let mut rng = SeededRng::new(4);

        // Off-interval steps are no-ops.
        let t = evaluate_expansions(
            &mut net,
            &batch,
            &policy,
            RatioOrientation::ExpOverOrig,
            &mut rng,
            9,
        )
        .unwrap();
        assert!(t.events.is_empty());

        // λ=1 accepts any strictly positive new-row information, but the
        // explicit rank-1 cap makes the layer report as capped instead.
        let t = evaluate_expansions(
            &mut net,
            &batch,
            &policy,
            RatioOrientation::ExpOverOrig,
            &mut rng,
            10,
        )
        .unwrap();
        assert!(t.events.is_empty());
        assert_eq!(t.capped, vec!["scalar".to_string()]);

        // Infinite λ never probes or expands.
        let policy_inf = ExpansionPolicy {
            lambda: f64::INFINITY,
            ..policy
        };
        let t = evaluate_expansions(
            &mut net,
            &batch,
            &policy_inf,
            RatioOrientation::ExpOverOrig,
            &mut rng,
            10,
        )
        .unwrap();
        assert!(t.events.is_empty() && t.capped.is_empty());
    }

    #[test]
    fn accepted_expansion_installs_probed_column() {
        // d_in = 2 leaves headroom; λ=1 with positive signal must expand,
        // and the installed column must be the probed one bit for bit.
        let mut rng = SeededRng::new(21);
        let adapter = SeLoRALinear::new(
            "wide",
            crate::init::gaussian(2, 2, 1.0, &mut rng),
            Matrix2D::zeros(1, 2),
            &mut rng,
        )
        .unwrap();
        let mut net = OneLayer { adapter };
        *net.adapter.trainable_params_mut()[1].value_mut().unwrap() =
            Matrix2D::from_rows(&[vec![0.3, -0.2]]).unwrap();
        let batch = vec![(
            Matrix2D::from_rows(&[vec![1.0, -1.0]]).unwrap(),
            Matrix2D::from_rows(&[vec![0.5, 0.5]]).unwrap(),
        )];
        let policy = ExpansionPolicy {
            lambda: 1.0,
            test_interval: 1,
            probe_batch_size: None,
        };

        // Pre-draw the K that evaluate_expansions will draw.
        let mut probe_rng = SeededRng::new(8);
        let expected_k = net.adapter.draw_expansion_column(&mut probe_rng.clone());

        let t = evaluate_expansions(
            &mut net,
            &batch,
            &policy,
            RatioOrientation::ExpOverOrig,
            &mut probe_rng,
            1,
        )
        .unwrap();
        assert_eq!(t.events.len(), 1);
        assert_eq!(t.events[0].old_rank, 1);
        assert_eq!(t.events[0].new_rank, 2);
        assert!(t.events[0].fi_ratio >= 1.0);
        assert_eq!(net.adapter.rank(), 2);
        for i in 0..2 {
            assert_eq!(net.adapter.a().value().get(i, 1), expected_k.get(i, 0));
        }
    }
}
