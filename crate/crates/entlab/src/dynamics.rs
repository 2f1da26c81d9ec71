//! Numerical verification of the first-order entropy-change law and
//! instrumentation of training runs.
//!
//! For a tabular softmax policy, the one-step entropy change at a state is, to
//! first order, the negative covariance (under the current policy) between the
//! action log-probabilities and the applied logit change:
//! `dH ~= -Cov_a(log pi(a|s), dz[s][a])`. Composed with the closed-form logit
//! deltas of the exact update rules this gives per-rule predictions:
//! `-eta * Cov(log pi, pi * A)` for vanilla policy gradient and
//! `-eta * Cov(log pi, A)` for natural policy gradient. [`verify_first_order`]
//! measures the actual entropy change on a geometric step-size schedule and
//! checks that the prediction error decays like `eta^2` (the Taylor
//! remainder): halving `eta` must quarter the error.

use serde::{Deserialize, Serialize};

use crate::advantage::grpo_advantage;
use crate::losses::{npg_update, pg_update, PgBatch, StateAdvantages};
use crate::policy::{PolicyError, PolicyTable, SequencePolicy};
use crate::tasks::GroupRollout;

#[derive(Debug, thiserror::Error)]
pub enum DynamicsError {
    #[error("policies have different dimensions")]
    DimensionMismatch,
    #[error("state weights must be non-empty and sum to a positive value")]
    BadStateWeights,
    #[error("unknown update rule")]
    UnknownRule,
    #[error("step-size schedule must be strictly decreasing with >= 3 values")]
    BadSchedule,
    #[error("group {0} has fewer than 2 responses")]
    GroupTooSmall(usize),
    #[error("need at least 2 step records, got {0}")]
    TooFewRecords(usize),
    #[error("degenerate run: initial and final entropy coincide")]
    DegenerateEntropy,
    #[error("degenerate run: initial and final reward coincide")]
    DegenerateReward,
    #[error("quantiles must lie in (0, 100], got {0}")]
    BadQuantile(f64),
    #[error("empty input")]
    Empty,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
}

/// Weight of one visited state in an expectation over states; normally the
/// empirical distribution of the rollout batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateWeight {
    pub state: usize,
    pub weight: f64,
}

/// Uniform weights over a set of states.
pub fn uniform_weights(states: &[usize]) -> Vec<StateWeight> {
    let w = 1.0 / states.len() as f64;
    states.iter().map(|&state| StateWeight { state, weight: w }).collect()
}

fn check_weights(states: &[StateWeight]) -> Result<f64, DynamicsError> {
    if states.is_empty() {
        return Err(DynamicsError::BadStateWeights);
    }
    let total: f64 = states.iter().map(|w| w.weight).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(DynamicsError::BadStateWeights);
    }
    Ok(total)
}

/// Covariance of `(x_a, y_a)` under the distribution `probs`.
fn weighted_cov(probs: &[f64], xs: &[f64], ys: &[f64]) -> f64 {
    let ex: f64 = probs.iter().zip(xs).map(|(p, x)| p * x).sum();
    let ey: f64 = probs.iter().zip(ys).map(|(p, y)| p * y).sum();
    let exy: f64 = probs.iter().zip(xs.iter().zip(ys)).map(|(p, (x, y))| p * x * y).sum();
    exy - ex * ey
}

/// First-order entropy-change prediction from two policy snapshots:
/// `E_s[-Cov_{a ~ pi_before}(log pi_before(a|s), z_after - z_before)]`.
pub fn lemma1_predict(
    before: &PolicyTable,
    after: &PolicyTable,
    states: &[StateWeight],
) -> Result<f64, DynamicsError> {
    if before.num_actions() != after.num_actions() || after.num_states() < before.num_states() {
        return Err(DynamicsError::DimensionMismatch);
    }
    let total = check_weights(states)?;
    let mut acc = 0.0;
    for sw in states {
        let probs = before.action_distribution(sw.state)?.into_vec();
        let lps = before.log_prob_row(sw.state)?;
        let dz: Vec<f64> = after
            .logits_row(sw.state)
            .iter()
            .zip(before.logits_row(sw.state))
            .map(|(a, b)| a - b)
            .collect();
        acc += sw.weight * -weighted_cov(&probs, &lps, &dz);
    }
    Ok(acc / total)
}

/// Update rule whose closed-form logit delta feeds the per-rule theorems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    Pg,
    Npg,
}

/// Per-rule first-order entropy-change prediction:
/// `-eta * E_s[Cov_a(log pi, pi * A)]` (pg) or `-eta * E_s[Cov_a(log pi, A)]`
/// (npg).
///
/// The pg coordinate subtracts the policy-mean advantage first (the
/// true-advantage normalization; a genuine advantage function already has
/// `E_pi[A] = 0`), so the prediction composes exactly with the logit delta the
/// exact update actually applies. A state-constant advantage therefore
/// predicts zero change under both rules.
pub fn theorem_predict(
    policy: &PolicyTable,
    advantages: &[StateAdvantages],
    eta: f64,
    rule: UpdateRule,
    states: &[StateWeight],
) -> Result<f64, DynamicsError> {
    let total = check_weights(states)?;
    let mut by_state: std::collections::BTreeMap<usize, &StateAdvantages> =
        std::collections::BTreeMap::new();
    for sa in advantages {
        by_state.insert(sa.state, sa);
    }
    let mut acc = 0.0;
    for sw in states {
        let sa = by_state
            .get(&sw.state)
            .ok_or(DynamicsError::BadStateWeights)?;
        let probs = policy.action_distribution(sw.state)?.into_vec();
        let lps = policy.log_prob_row(sw.state)?;
        let second: Vec<f64> = match rule {
            UpdateRule::Pg => {
                let mean: f64 = probs.iter().zip(&sa.values).map(|(p, a)| p * a).sum();
                probs
                    .iter()
                    .zip(&sa.values)
                    .map(|(p, a)| p * (a - mean))
                    .collect()
            }
            UpdateRule::Npg => sa.values.clone(),
        };
        acc += sw.weight * -(eta * weighted_cov(&probs, &lps, &second));
    }
    Ok(acc / total)
}

/// Entropy under `policy` averaged over weighted states.
pub fn weighted_entropy(policy: &PolicyTable, states: &[StateWeight]) -> Result<f64, DynamicsError> {
    let total = check_weights(states)?;
    let mut acc = 0.0;
    for sw in states {
        acc += sw.weight * policy.state_entropy(sw.state)?;
    }
    Ok(acc / total)
}

/// One row of the first-order verification table.
#[derive(Debug, Clone, Serialize)]
pub struct FirstOrderRow {
    pub eta: f64,
    pub predicted: f64,
    pub measured: f64,
    pub abs_err: f64,
    /// `err(eta) / err(eta/2)`; None where either error sits at machine noise.
    pub ratio_to_next: Option<f64>,
}

/// Errors below this are treated as machine noise when forming decay ratios.
pub const FIRST_ORDER_NOISE_FLOOR: f64 = 1e-13;

/// Applies one exact update per step size, measures the entropy change on the
/// weighted states, and reports `|measured - predicted|` with its decay ratio
/// between consecutive schedule entries.
pub fn verify_first_order(
    policy: &PolicyTable,
    advantages: &[StateAdvantages],
    rule: UpdateRule,
    etas: &[f64],
    states: &[StateWeight],
) -> Result<Vec<FirstOrderRow>, DynamicsError> {
    if etas.len() < 3 || etas.windows(2).any(|w| w[1] >= w[0]) || etas.iter().any(|e| *e <= 0.0) {
        return Err(DynamicsError::BadSchedule);
    }
    let h_before = weighted_entropy(policy, states)?;
    let mut rows: Vec<FirstOrderRow> = Vec::with_capacity(etas.len());
    for &eta in etas {
        let predicted = theorem_predict(policy, advantages, eta, rule, states)?;
        let updated = match rule {
            UpdateRule::Pg => pg_update(policy, PgBatch::ExactExpectation(advantages), eta)?.0,
            UpdateRule::Npg => npg_update(policy, advantages, eta)?.0,
        };
        let measured = weighted_entropy(&updated, states)? - h_before;
        rows.push(FirstOrderRow {
            eta,
            predicted,
            measured,
            abs_err: (measured - predicted).abs(),
            ratio_to_next: None,
        });
    }
    for i in 0..rows.len() - 1 {
        let e0 = rows[i].abs_err;
        let e1 = rows[i + 1].abs_err;
        rows[i].ratio_to_next = if e0 > FIRST_ORDER_NOISE_FLOOR && e1 > FIRST_ORDER_NOISE_FLOOR {
            Some(e0 / e1)
        } else {
            None
        };
    }
    Ok(rows)
}

/// Batch covariance instrumentation over rollout groups.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchCovariance {
    /// Mean of the per-group covariances.
    pub mean: f64,
    pub per_group: Vec<f64>,
}

/// Group-wise covariance over the K responses of each group between the
/// length-normalized sequence log-prob and `pi(y|x) * A(y|x)`, where
/// `pi(y|x) = exp(normalized log-prob)` and A is the standardized group
/// advantage (zero when the group rewards are constant). Population
/// covariance, averaged over groups.
pub fn batch_covariance(
    groups: &[GroupRollout],
    policy: &SequencePolicy,
) -> Result<BatchCovariance, DynamicsError> {
    if groups.is_empty() {
        return Err(DynamicsError::Empty);
    }
    let mut per_group = Vec::with_capacity(groups.len());
    for (gi, g) in groups.iter().enumerate() {
        let k = g.responses.len();
        if k < 2 {
            return Err(DynamicsError::GroupTooSmall(gi));
        }
        let advantages = match grpo_advantage(&g.rewards) {
            Ok(a) => a,
            Err(_) => vec![0.0; k],
        };
        let mut xs = Vec::with_capacity(k);
        let mut ys = Vec::with_capacity(k);
        for (resp, adv) in g.responses.iter().zip(&advantages) {
            let lp = policy.sequence_log_prob(g.prompt, resp, true)?;
            xs.push(lp);
            ys.push(lp.exp() * adv);
        }
        let mx = xs.iter().sum::<f64>() / k as f64;
        let my = ys.iter().sum::<f64>() / k as f64;
        let cov = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (x - mx) * (y - my))
            .sum::<f64>()
            / k as f64;
        per_group.push(cov);
    }
    let mean = per_group.iter().sum::<f64>() / per_group.len() as f64;
    Ok(BatchCovariance { mean, per_group })
}

/// One training step's instrumentation record (the `steps.csv` schema).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub entropy: f64,
    pub cov_mean: f64,
    pub train_acc: f64,
    pub val_reward: f64,
    pub resp_len: f64,
    pub cov_easy: f64,
    pub cov_mid: f64,
    pub cov_hard: f64,
}

/// One step's first-order prediction record (the `dynamics.csv` schema).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyDeltaPrediction {
    pub step: usize,
    pub eta: f64,
    pub pred_lemma1: f64,
    pub pred_theorem: f64,
    pub measured: f64,
    pub abs_err: f64,
}

/// Cumulative consumption fractions for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsumptionCurve {
    /// `(H0 - H_t) / (H0 - H_final)` as recorded.
    pub entropy_raw: Vec<f64>,
    /// `(R_t - R0) / (R_final - R0)` as recorded.
    pub reward_raw: Vec<f64>,
    /// Raw curves clamped to a monotone [0, 1] envelope.
    pub entropy_envelope: Vec<f64>,
    pub reward_envelope: Vec<f64>,
}

/// Fractions of the total entropy drop and reward gain realized by each step.
pub fn consumption_curve(records: &[StepRecord]) -> Result<ConsumptionCurve, DynamicsError> {
    if records.len() < 2 {
        return Err(DynamicsError::TooFewRecords(records.len()));
    }
    let h0 = records[0].entropy;
    let h_final = records[records.len() - 1].entropy;
    let r0 = records[0].val_reward;
    let r_final = records[records.len() - 1].val_reward;
    if h0 == h_final {
        return Err(DynamicsError::DegenerateEntropy);
    }
    if r0 == r_final {
        return Err(DynamicsError::DegenerateReward);
    }
    let entropy_raw: Vec<f64> = records.iter().map(|r| (h0 - r.entropy) / (h0 - h_final)).collect();
    let reward_raw: Vec<f64> = records
        .iter()
        .map(|r| (r.val_reward - r0) / (r_final - r0))
        .collect();
    let envelope = |raw: &[f64]| {
        let mut out = Vec::with_capacity(raw.len());
        let mut running: f64 = 0.0;
        for v in raw {
            running = running.max(v.clamp(0.0, 1.0));
            out.push(running);
        }
        out
    };
    Ok(ConsumptionCurve {
        entropy_envelope: envelope(&entropy_raw),
        reward_envelope: envelope(&reward_raw),
        entropy_raw,
        reward_raw,
    })
}

/// One row of the covariance quantile table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileRow {
    /// Quantile in percent; 100 means "all tokens".
    pub quantile_pct: f64,
    /// `ceil(q * N / 100)` largest covariances enter the mean.
    pub count: usize,
    pub mean: f64,
}

/// The quantile ladder used for covariance distribution tables.
pub const DEFAULT_QUANTILES: [f64; 6] = [0.02, 0.2, 2.0, 20.0, 50.0, 100.0];

/// For each quantile `q`, the mean of the `ceil(q*N/100)` largest covariances,
/// emitted in the given order.
pub fn cov_quantile_report(
    token_covs: &[f64],
    quantiles: &[f64],
) -> Result<Vec<QuantileRow>, DynamicsError> {
    if token_covs.is_empty() {
        return Err(DynamicsError::Empty);
    }
    for &q in quantiles {
        if !(q > 0.0 && q <= 100.0) {
            return Err(DynamicsError::BadQuantile(q));
        }
    }
    let mut sorted = token_covs.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let n = sorted.len();
    let mut rows = Vec::with_capacity(quantiles.len());
    for &q in quantiles {
        let count = ((q * n as f64 / 100.0).ceil() as usize).clamp(1, n);
        let mean = sorted[..count].iter().sum::<f64>() / count as f64;
        rows.push(QuantileRow {
            quantile_pct: q,
            count,
            mean,
        });
    }
    Ok(rows)
}
