//! Randomized verification suites for the first-order entropy-change results.
//!
//! Three families of checks run over seeded random bandit instances:
//! 1. exact-update identity: the explicit score-function sum must reproduce
//!    the closed-form logit delta `eta * pi * A` to 1e-12;
//! 2. lemma/theorem agreement: constructed deltas feed the snapshot-level
//!    prediction, which must match the per-rule prediction to 1e-12;
//! 3. first-order decay: across a halving step-size schedule the prediction
//!    error must shrink roughly 4x per halving (second-order remainder),
//!    with the decay ratio inside [3, 5] for the smallest steps.
//!
//! `inject_fault` doubles the applied logit delta in suite 1; the identity
//! check must then fail, which is the suite's negative control.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::HarnessError;
use crate::dynamics::{
    lemma1_predict, theorem_predict, uniform_weights, verify_first_order, UpdateRule,
};
use crate::losses::{pg_update, PgBatch, StateAdvantages};
use crate::policy::{PolicyInit, PolicyTable};

/// The halving step-size schedule used by the first-order suite.
pub const DEFAULT_ETA_SCHEDULE: [f64; 5] = [0.1, 0.05, 0.025, 0.0125, 0.00625];

#[derive(Debug, Clone)]
pub struct FirstOrderSummary {
    pub rule: UpdateRule,
    pub instances: usize,
    pub passed: usize,
    /// Median of the decay ratios at the two smallest schedule pairs.
    pub median_ratios: [f64; 2],
}

/// Outcome of [`verify_dynamics`].
#[derive(Debug, Clone)]
pub struct DynamicsReport {
    pub prop1_max_err: f64,
    pub prop1_ok: bool,
    pub agreement_max_err: f64,
    pub agreement_ok: bool,
    pub first_order: Vec<FirstOrderSummary>,
    pub worked_instance_ok: bool,
    pub failures: Vec<String>,
}

impl DynamicsReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Human-readable table, one block per suite.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "exact-update identity: max |delta - eta*pi*A| = {:.3e}  [{}]\n",
            self.prop1_max_err,
            if self.prop1_ok { "ok" } else { "FAIL" }
        ));
        out.push_str(&format!(
            "lemma/theorem agreement: max diff = {:.3e}  [{}]\n",
            self.agreement_max_err,
            if self.agreement_ok { "ok" } else { "FAIL" }
        ));
        for s in &self.first_order {
            out.push_str(&format!(
                "first-order decay ({:?}): {}/{} instances with err(eta)/err(eta/2) in [3,5]; median ratios {:.3}, {:.3}\n",
                s.rule, s.passed, s.instances, s.median_ratios[0], s.median_ratios[1]
            ));
        }
        out.push_str(&format!(
            "worked instance (npg, pi=[.6,.3,.1], A=[1,0,-1], eta=.01): [{}]\n",
            if self.worked_instance_ok { "ok" } else { "FAIL" }
        ));
        if !self.failures.is_empty() {
            out.push_str("failures:\n");
            for f in &self.failures {
                out.push_str(&format!("  - {f}\n"));
            }
        }
        out
    }
}

fn random_bandit(rng: &mut ChaCha8Rng) -> PolicyTable {
    let v = rng.gen_range(2..9);
    let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-2.0..2.0)).collect();
    PolicyTable::new(1, v, PolicyInit::Explicit(logits)).expect("finite logits")
}

/// Mean-zero (under pi) advantages, the Lemma-2 normalization of a random
/// reward vector.
fn centered_advantages(rng: &mut ChaCha8Rng, policy: &PolicyTable) -> Vec<f64> {
    let v = policy.num_actions();
    let probs = policy.action_distribution(0).expect("state 0");
    let raw: Vec<f64> = (0..v).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mean: f64 = raw.iter().zip(probs.as_slice()).map(|(a, p)| a * p).sum();
    raw.iter().map(|a| a - mean).collect()
}

/// Runs all suites; deterministic given `seed`.
pub fn verify_dynamics(seed: u64, inject_fault: bool) -> Result<DynamicsReport, HarnessError> {
    let mut failures = Vec::new();

    // Suite 1: exact-update identity over 100 random bandits.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prop1_max_err: f64 = 0.0;
    for _ in 0..100 {
        let policy = random_bandit(&mut rng);
        let values = centered_advantages(&mut rng, &policy);
        let eta = rng.gen_range(0.01..0.2);
        let advs = [StateAdvantages { state: 0, values: values.clone() }];
        let (_, report) = pg_update(&policy, PgBatch::ExactExpectation(&advs), eta)?;
        let probs = policy.action_distribution(0)?;
        let fault = if inject_fault { 2.0 } else { 1.0 };
        for (a, delta) in report.logit_deltas[&0].iter().enumerate() {
            let err = (delta * fault - eta * probs[a] * values[a]).abs();
            prop1_max_err = prop1_max_err.max(err);
        }
    }
    let prop1_ok = prop1_max_err <= 1e-12;
    if !prop1_ok {
        failures.push(format!(
            "proposition-1 identity violated: max error {prop1_max_err:.3e} > 1e-12"
        ));
    }

    // Suite 2: lemma-1 prediction composed with constructed closed-form
    // deltas equals the per-rule prediction.
    let mut agreement_max_err: f64 = 0.0;
    for _ in 0..50 {
        let policy = random_bandit(&mut rng);
        let values = centered_advantages(&mut rng, &policy);
        let eta = rng.gen_range(0.001..0.1);
        let probs = policy.action_distribution(0)?;
        let advs = [StateAdvantages { state: 0, values: values.clone() }];
        let weights = uniform_weights(&[0]);
        for rule in [UpdateRule::Pg, UpdateRule::Npg] {
            let dz: Vec<f64> = match rule {
                UpdateRule::Pg => (0..values.len())
                    .map(|a| eta * probs[a] * values[a])
                    .collect(),
                UpdateRule::Npg => values.iter().map(|a| eta * a).collect(),
            };
            let mut after = policy.clone();
            after.add_to_row(0, &dz)?;
            let lhs = lemma1_predict(&policy, &after, &weights)?;
            let rhs = theorem_predict(&policy, &advs, eta, rule, &weights)?;
            agreement_max_err = agreement_max_err.max((lhs - rhs).abs());
        }
    }
    let agreement_ok = agreement_max_err <= 1e-12;
    if !agreement_ok {
        failures.push(format!(
            "lemma/theorem agreement violated: max diff {agreement_max_err:.3e} > 1e-12"
        ));
    }

    // Suite 3: Taylor-remainder decay of the prediction error.
    let mut first_order = Vec::new();
    for rule in [UpdateRule::Pg, UpdateRule::Npg] {
        let mut passed = 0;
        let instances = 100;
        let mut last_ratios: Vec<f64> = Vec::new();
        let mut second_ratios: Vec<f64> = Vec::new();
        for _ in 0..instances {
            let policy = random_bandit(&mut rng);
            let values = centered_advantages(&mut rng, &policy);
            let advs = [StateAdvantages { state: 0, values }];
            let rows = verify_first_order(
                &policy,
                &advs,
                rule,
                &DEFAULT_ETA_SCHEDULE,
                &uniform_weights(&[0]),
            )?;
            let r_second = rows[rows.len() - 3].ratio_to_next;
            let r_last = rows[rows.len() - 2].ratio_to_next;
            if let Some(r) = r_second {
                second_ratios.push(r);
            }
            if let Some(r) = r_last {
                last_ratios.push(r);
            }
            // An instance passes when both smallest-step ratios show the
            // quadratic remainder, or sits below the noise floor entirely.
            let ok = |r: Option<f64>| r.map(|x| (3.0..=5.0).contains(&x)).unwrap_or(true);
            if ok(r_second) && ok(r_last) {
                passed += 1;
            }
        }
        let median = |xs: &mut Vec<f64>| -> f64 {
            if xs.is_empty() {
                return f64::NAN;
            }
            xs.sort_by(|a, b| a.total_cmp(b));
            xs[xs.len() / 2]
        };
        let summary = FirstOrderSummary {
            rule,
            instances,
            passed,
            median_ratios: [median(&mut second_ratios), median(&mut last_ratios)],
        };
        if summary.passed * 10 < summary.instances * 9 {
            failures.push(format!(
                "first-order decay ({rule:?}): only {}/{} instances in [3,5]",
                summary.passed, summary.instances
            ));
        }
        first_order.push(summary);
    }

    // Worked instance: npg on pi = [0.6, 0.3, 0.1] with A = [1, 0, -1].
    let policy = PolicyTable::bandit_from_probs(&[0.6, 0.3, 0.1])?;
    let advs = [StateAdvantages { state: 0, values: vec![1.0, 0.0, -1.0] }];
    let weights = uniform_weights(&[0]);
    let pred = theorem_predict(&policy, &advs, 0.01, UpdateRule::Npg, &weights)?;
    let (updated, _) = crate::losses::npg_update(&policy, &advs, 0.01)?;
    let measured = updated.state_entropy(0)? - policy.state_entropy(0)?;
    let pred_ok = (pred - (-0.0037274)).abs() < 1e-6;
    let measured_ok = ((measured - pred) / pred).abs() < 0.05;
    let worked_instance_ok = pred_ok && measured_ok;
    if !worked_instance_ok {
        failures.push(format!(
            "worked instance: prediction {pred:.7}, measured {measured:.7}"
        ));
    }

    Ok(DynamicsReport {
        prop1_max_err,
        prop1_ok,
        agreement_max_err,
        agreement_ok,
        first_order,
        worked_instance_ok,
        failures,
    })
}
