//! Update rules and surrogate losses with analytic gradients over the logit
//! table.
//!
//! Everything here follows one convention: a *loss* is the scalar being
//! minimized (the surrogate objective negated), gradients are taken with
//! respect to the per-(state, action) logits, and an update applies
//! `z <- z - eta * grad`. Token-level losses average over the whole batch of
//! `N` tokens.
//!
//! Per token the surrogate pieces are built from the importance ratio
//! `exp(log pi(y) - log pi_old(y))` and the (response-constant) advantage.
//! The chain rule through the softmax uses the score Jacobian
//! `d log pi(y|s) / d z[s][a] = 1{a=y} - pi(a|s)`.
//!
//! Two covariance-aware regularizers operate on the token-wise centered
//! cross-product `Cov(y_i)` of (current log-prob, advantage):
//! * `clip_cov`: uniformly sample `floor(r*N)` tokens whose covariance lies in
//!   `[cov_low, cov_high]` and detach them — they keep their value in the
//!   batch mean but contribute zero gradient;
//! * `kl_cov`: the `ceil(k*N)` highest-covariance tokens get a penalty on top
//!   of the plain (unclipped) ratio objective, either `beta*|log-ratio|` on
//!   the taken token or the exact categorical `beta*KL(pi_old || pi)`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::log_softmax;
use crate::policy::{PolicyError, PolicyTable, Token};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("batch must contain at least {needed} tokens, got {got}")]
    BatchTooSmall { needed: usize, got: usize },
    #[error("token {index}: non-finite or non-positive importance ratio")]
    BadRatio { index: usize },
    #[error("token {index}: missing or non-finite old log-prob")]
    BadOldLogProb { index: usize },
    #[error("clip thresholds must lie in (0, 1): low {low}, high {high}")]
    BadClipRange { low: f64, high: f64 },
    #[error("covariance bounds must satisfy low < high: low {low}, high {high}")]
    BadCovBounds { low: f64, high: f64 },
    #[error("step size eta must be > 0, got {0}")]
    BadEta(f64),
    #[error("coefficient must be >= 0, got {0}")]
    BadCoefficient(f64),
    #[error("selection proportion must lie in [0, 1], got {0}")]
    BadProportion(f64),
    #[error("advantage row for state {state}: expected {expected} values, got {got}")]
    AdvantageShape { state: usize, expected: usize, got: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// One rollout token's view for loss evaluation: where it sits, what was
/// sampled, and the quantities attached to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub prompt: usize,
    pub response: usize,
    pub position: usize,
    pub token: Token,
    /// Index of the prefix state in the policy table.
    pub state: usize,
    /// `log pi_old(y_t | prefix)`, frozen at rollout time.
    pub old_log_prob: f64,
    /// `log pi_theta(y_t | prefix)` under the current policy; refreshed once
    /// per inner epoch.
    pub cur_log_prob: f64,
    pub advantage: f64,
    /// Token-wise centered cross-product, Eq.-style `Cov(y_i)`; must be
    /// populated before any covariance-based loss runs.
    pub covariance: f64,
}

/// Asymmetric PPO clip thresholds (`eps_low`, `eps_high`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipRange {
    pub low: f64,
    pub high: f64,
}

impl ClipRange {
    pub fn symmetric(eps: f64) -> Self {
        Self { low: eps, high: eps }
    }

    fn validate(&self) -> Result<(), LossError> {
        if !(self.low > 0.0 && self.low < 1.0 && self.high > 0.0 && self.high < 1.0) {
            return Err(LossError::BadClipRange {
                low: self.low,
                high: self.high,
            });
        }
        Ok(())
    }
}

/// Sparse gradient (or delta) over logit-table rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LogitGrad {
    rows: BTreeMap<usize, Vec<f64>>,
    num_actions: usize,
}

impl LogitGrad {
    pub fn new(num_actions: usize) -> Self {
        Self {
            rows: BTreeMap::new(),
            num_actions,
        }
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, state: usize) -> Option<&[f64]> {
        self.rows.get(&state).map(|r| r.as_slice())
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.rows.iter().map(|(s, r)| (*s, r.as_slice()))
    }

    fn row_mut(&mut self, state: usize) -> &mut Vec<f64> {
        let n = self.num_actions;
        self.rows.entry(state).or_insert_with(|| vec![0.0; n])
    }

    /// Accumulates `coeff * v` into the row of `state`.
    pub fn axpy_row(&mut self, state: usize, coeff: f64, v: &[f64]) {
        let row = self.row_mut(state);
        for (r, x) in row.iter_mut().zip(v) {
            *r += coeff * x;
        }
    }

    /// Accumulates `coeff * (e_token - probs)`, the score-function direction.
    pub fn add_score(&mut self, state: usize, token: usize, coeff: f64, probs: &[f64]) {
        let row = self.row_mut(state);
        for (a, r) in row.iter_mut().enumerate() {
            let indicator = if a == token { 1.0 } else { 0.0 };
            *r += coeff * (indicator - probs[a]);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for row in self.rows.values_mut() {
            for v in row.iter_mut() {
                *v *= c;
            }
        }
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|r| r.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Applies `z[s] += scale * row` for every stored row.
    pub fn apply_to(&self, table: &mut PolicyTable, scale: f64) -> Result<(), PolicyError> {
        for (state, row) in &self.rows {
            let scaled: Vec<f64> = row.iter().map(|v| v * scale).collect();
            table.add_to_row(*state, &scaled)?;
        }
        Ok(())
    }

    /// Elementwise maximum absolute difference against another gradient.
    pub fn max_abs_diff(&self, other: &LogitGrad) -> f64 {
        let mut m: f64 = 0.0;
        let states: std::collections::BTreeSet<usize> =
            self.rows.keys().chain(other.rows.keys()).copied().collect();
        let zero = vec![0.0; self.num_actions];
        for s in states {
            let a = self.rows.get(&s).unwrap_or(&zero);
            let b = other.rows.get(&s).unwrap_or(&zero);
            for (x, y) in a.iter().zip(b.iter()) {
                m = m.max((x - y).abs());
            }
        }
        m
    }
}

/// Dense advantage row for one state (exact expectation updates).
#[derive(Debug, Clone, PartialEq)]
pub struct StateAdvantages {
    pub state: usize,
    pub values: Vec<f64>,
}

/// Which tokens a covariance-aware loss touched.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Batch indices of the selected tokens, ascending.
    pub indices: Vec<usize>,
    /// How many tokens were eligible (Clip-Cov candidates; N for KL-Cov).
    pub candidates: usize,
    /// Covariance range over the selected tokens (NaN when none).
    pub cov_min: f64,
    pub cov_max: f64,
}

impl Selection {
    fn from_indices(mut indices: Vec<usize>, candidates: usize, toks: &[TokenRecord]) -> Self {
        indices.sort_unstable();
        let mut cov_min = f64::NAN;
        let mut cov_max = f64::NAN;
        for &i in &indices {
            let c = toks[i].covariance;
            if cov_min.is_nan() || c < cov_min {
                cov_min = c;
            }
            if cov_max.is_nan() || c > cov_max {
                cov_max = c;
            }
        }
        Self {
            indices,
            candidates,
            cov_min,
            cov_max,
        }
    }
}

/// One applied update: logit deltas, selection, and summary scalars.
#[derive(Debug, Clone)]
pub struct UpdateReport {
    /// `z_after - z_before` per touched state.
    pub logit_deltas: BTreeMap<usize, Vec<f64>>,
    pub selection: Selection,
    /// Scalar loss (minimization convention); NaN where no scalar exists
    /// (natural policy gradient).
    pub loss: f64,
    pub grad_norm: f64,
    pub eta: f64,
}

/// Token-wise centered cross-product of (current log-prob, advantage):
/// `Cov(y_i) = (lp_i - mean lp) * (A_i - mean A)` over the batch.
///
/// The batch mean of the outputs equals the population covariance of the two
/// coordinates.
pub fn token_covariance(batch: &[TokenRecord]) -> Result<Vec<f64>, LossError> {
    let n = batch.len();
    if n < 2 {
        return Err(LossError::BatchTooSmall { needed: 2, got: n });
    }
    let mean_lp = batch.iter().map(|t| t.cur_log_prob).sum::<f64>() / n as f64;
    let mean_adv = batch.iter().map(|t| t.advantage).sum::<f64>() / n as f64;
    Ok(batch
        .iter()
        .map(|t| (t.cur_log_prob - mean_lp) * (t.advantage - mean_adv))
        .collect())
}

/// Recomputes `cur_log_prob` for every token from the policy, then fills the
/// covariance fields. Done once per inner epoch.
pub fn refresh_batch(policy: &PolicyTable, batch: &mut [TokenRecord]) -> Result<(), LossError> {
    let mut row_cache: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for t in batch.iter_mut() {
        let lps = row_cache
            .entry(t.state)
            .or_insert_with(|| log_softmax(policy.logits_row(t.state)));
        t.cur_log_prob = lps[t.token as usize];
    }
    let covs = token_covariance(batch)?;
    for (t, c) in batch.iter_mut().zip(covs) {
        t.covariance = c;
    }
    Ok(())
}

/// Per-state cache of (probs, log-probs) so tokens sharing a state reuse one
/// softmax evaluation.
struct RowCache<'a> {
    policy: &'a PolicyTable,
    rows: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
}

impl<'a> RowCache<'a> {
    fn new(policy: &'a PolicyTable) -> Self {
        Self {
            policy,
            rows: BTreeMap::new(),
        }
    }

    fn get(&mut self, state: usize) -> &(Vec<f64>, Vec<f64>) {
        self.rows.entry(state).or_insert_with(|| {
            let lps = log_softmax(self.policy.logits_row(state));
            let probs: Vec<f64> = lps.iter().map(|l| l.exp()).collect();
            (probs, lps)
        })
    }
}

fn check_old_log_probs(batch: &[TokenRecord]) -> Result<(), LossError> {
    for (i, t) in batch.iter().enumerate() {
        if !t.old_log_prob.is_finite() {
            return Err(LossError::BadOldLogProb { index: i });
        }
    }
    Ok(())
}

fn ratio_at(lp: f64, old_lp: f64, index: usize) -> Result<f64, LossError> {
    let ratio = (lp - old_lp).exp();
    if !ratio.is_finite() || ratio <= 0.0 {
        return Err(LossError::BadRatio { index });
    }
    Ok(ratio)
}

/// Plain importance-weighted objective: loss `-mean(ratio * A)`.
pub fn plain_ratio_grad(
    policy: &PolicyTable,
    batch: &[TokenRecord],
) -> Result<(f64, LogitGrad), LossError> {
    if batch.is_empty() {
        return Err(LossError::BatchTooSmall { needed: 1, got: 0 });
    }
    check_old_log_probs(batch)?;
    let n = batch.len() as f64;
    let mut cache = RowCache::new(policy);
    let mut loss = 0.0;
    let mut grad = LogitGrad::new(policy.num_actions());
    for (i, t) in batch.iter().enumerate() {
        let (probs, lps) = {
            let r = cache.get(t.state);
            (r.0.clone(), r.1.clone())
        };
        let lp = lps[t.token as usize];
        let ratio = ratio_at(lp, t.old_log_prob, i)?;
        loss -= ratio * t.advantage / n;
        grad.add_score(t.state, t.token as usize, -ratio * t.advantage / n, &probs);
    }
    Ok((loss, grad))
}

/// PPO clipped surrogate: loss `-mean(min(ratio*A, clip(ratio)*A))`.
///
/// Symmetric PPO is `low == high == 0.2`; clip-higher raises `high`.
pub fn ppo_clip_grad(
    policy: &PolicyTable,
    batch: &[TokenRecord],
    clip: ClipRange,
) -> Result<(f64, LogitGrad), LossError> {
    clip.validate()?;
    if batch.is_empty() {
        return Err(LossError::BatchTooSmall { needed: 1, got: 0 });
    }
    check_old_log_probs(batch)?;
    let n = batch.len() as f64;
    let mut cache = RowCache::new(policy);
    let mut loss = 0.0;
    let mut grad = LogitGrad::new(policy.num_actions());
    for (i, t) in batch.iter().enumerate() {
        let (probs, lps) = {
            let r = cache.get(t.state);
            (r.0.clone(), r.1.clone())
        };
        let lp = lps[t.token as usize];
        let ratio = ratio_at(lp, t.old_log_prob, i)?;
        let unclipped = ratio * t.advantage;
        let clipped = ratio.clamp(1.0 - clip.low, 1.0 + clip.high) * t.advantage;
        loss -= unclipped.min(clipped) / n;
        // Gradient flows only through the unclipped branch of the min.
        if unclipped <= clipped {
            grad.add_score(t.state, t.token as usize, -ratio * t.advantage / n, &probs);
        }
    }
    Ok((loss, grad))
}

/// Gradient of the mean exact entropy over the batch's visited states
/// (empirical token weights), as a pair (mean entropy, gradient of it).
fn mean_entropy_and_grad(
    policy: &PolicyTable,
    batch: &[TokenRecord],
) -> Result<(f64, LogitGrad), LossError> {
    let n = batch.len() as f64;
    let mut cache = RowCache::new(policy);
    let mut mean_h = 0.0;
    let mut grad = LogitGrad::new(policy.num_actions());
    for t in batch {
        let (probs, lps) = {
            let r = cache.get(t.state);
            (r.0.clone(), r.1.clone())
        };
        let h: f64 = probs
            .iter()
            .zip(&lps)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, lp)| -p * lp)
            .sum();
        mean_h += h / n;
        // dH/dz_a = -pi_a (log pi_a + H)
        let row: Vec<f64> = probs
            .iter()
            .zip(&lps)
            .map(|(p, lp)| -p * (lp + h))
            .collect();
        grad.axpy_row(t.state, 1.0 / n, &row);
    }
    Ok((mean_h, grad))
}

/// PPO-clip plus an entropy bonus: loss `L_ppo - alpha * H_mean`.
pub fn entropy_reg_grad(
    policy: &PolicyTable,
    batch: &[TokenRecord],
    clip: ClipRange,
    alpha: f64,
) -> Result<(f64, LogitGrad), LossError> {
    if alpha < 0.0 {
        return Err(LossError::BadCoefficient(alpha));
    }
    let (mut loss, mut grad) = ppo_clip_grad(policy, batch, clip)?;
    if alpha > 0.0 {
        let (mean_h, h_grad) = mean_entropy_and_grad(policy, batch)?;
        loss -= alpha * mean_h;
        for (state, row) in h_grad.rows() {
            grad.axpy_row(state, -alpha, row);
        }
    }
    Ok((loss, grad))
}

/// PPO-clip plus a reference-KL penalty: loss `L_ppo + beta * KL(pi || pi_ref)`
/// averaged over visited states (exact categorical KL).
pub fn ref_kl_grad(
    policy: &PolicyTable,
    ref_policy: &PolicyTable,
    batch: &[TokenRecord],
    clip: ClipRange,
    beta_ref: f64,
) -> Result<(f64, LogitGrad), LossError> {
    if beta_ref < 0.0 {
        return Err(LossError::BadCoefficient(beta_ref));
    }
    let (mut loss, mut grad) = ppo_clip_grad(policy, batch, clip)?;
    if beta_ref > 0.0 {
        let n = batch.len() as f64;
        let mut cache = RowCache::new(policy);
        let mut ref_cache: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for t in batch {
            let (probs, lps) = {
                let r = cache.get(t.state);
                (r.0.clone(), r.1.clone())
            };
            let ref_lps = ref_cache
                .entry(t.state)
                .or_insert_with(|| log_softmax(ref_policy.logits_row(t.state)));
            let kl: f64 = probs
                .iter()
                .zip(lps.iter().zip(ref_lps.iter()))
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, (lp, rlp))| p * (lp - rlp))
                .sum();
            loss += beta_ref * kl / n;
            // dKL/dz_a = pi_a ((log pi_a - log ref_a) - KL)
            let row: Vec<f64> = probs
                .iter()
                .zip(lps.iter().zip(ref_lps.iter()))
                .map(|(p, (lp, rlp))| p * ((lp - rlp) - kl))
                .collect();
            grad.axpy_row(t.state, beta_ref / n, &row);
        }
    }
    Ok((loss, grad))
}

/// Exact categorical KL `KL(p || q)` between two log-prob rows.
pub fn categorical_kl(p_lps: &[f64], q_lps: &[f64]) -> f64 {
    p_lps
        .iter()
        .zip(q_lps)
        .map(|(lp, lq)| {
            let p = lp.exp();
            if p > 0.0 {
                p * (lp - lq)
            } else {
                0.0
            }
        })
        .sum()
}

/// Clip-Cov parameters: detach `floor(ratio * N)` tokens sampled uniformly
/// (without replacement) among those with covariance in `[cov_low, cov_high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipCovParams {
    pub ratio: f64,
    pub cov_low: f64,
    pub cov_high: f64,
    pub seed: u64,
}

/// Selects the Clip-Cov token set; exposed separately so the sampling can be
/// checked against enumeration.
pub fn select_clip_cov(batch: &[TokenRecord], params: &ClipCovParams) -> Result<Selection, LossError> {
    if !(0.0..=1.0).contains(&params.ratio) {
        return Err(LossError::BadProportion(params.ratio));
    }
    if params.cov_low >= params.cov_high {
        return Err(LossError::BadCovBounds {
            low: params.cov_low,
            high: params.cov_high,
        });
    }
    let candidates: Vec<usize> = batch
        .iter()
        .enumerate()
        .filter(|(_, t)| t.covariance >= params.cov_low && t.covariance <= params.cov_high)
        .map(|(i, _)| i)
        .collect();
    let want = (params.ratio * batch.len() as f64).floor() as usize;
    let take = want.min(candidates.len());

    // Partial Fisher-Yates over the candidate list; stable across platforms.
    let mut pool = candidates.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut chosen = Vec::with_capacity(take);
    for i in 0..take {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
        chosen.push(pool[i]);
    }
    Ok(Selection::from_indices(chosen, candidates.len(), batch))
}

/// Clip-Cov loss: PPO-clip everywhere, except that the selected tokens are
/// detached — they stay in the mean's denominator at their current value but
/// contribute no gradient.
pub fn clip_cov_grad(
    policy: &PolicyTable,
    batch: &[TokenRecord],
    clip: ClipRange,
    params: &ClipCovParams,
) -> Result<(f64, LogitGrad, Selection), LossError> {
    let selection = select_clip_cov(batch, params)?;
    let (loss, grad) = clip_cov_grad_with_selection(policy, batch, clip, &selection.indices)?;
    Ok((loss, grad, selection))
}

/// Clip-Cov with the detached index set fixed by the caller.
pub fn clip_cov_grad_with_selection(
    policy: &PolicyTable,
    batch: &[TokenRecord],
    clip: ClipRange,
    detached: &[usize],
) -> Result<(f64, LogitGrad), LossError> {
    clip.validate()?;
    if batch.is_empty() {
        return Err(LossError::BatchTooSmall { needed: 1, got: 0 });
    }
    check_old_log_probs(batch)?;
    let detached: std::collections::BTreeSet<usize> = detached.iter().copied().collect();
    let n = batch.len() as f64;
    let mut cache = RowCache::new(policy);
    let mut loss = 0.0;
    let mut grad = LogitGrad::new(policy.num_actions());
    for (i, t) in batch.iter().enumerate() {
        let (probs, lps) = {
            let r = cache.get(t.state);
            (r.0.clone(), r.1.clone())
        };
        let lp = lps[t.token as usize];
        let ratio = ratio_at(lp, t.old_log_prob, i)?;
        let unclipped = ratio * t.advantage;
        let clipped = ratio.clamp(1.0 - clip.low, 1.0 + clip.high) * t.advantage;
        loss -= unclipped.min(clipped) / n;
        if !detached.contains(&i) && unclipped <= clipped {
            grad.add_score(t.state, t.token as usize, -ratio * t.advantage / n, &probs);
        }
    }
    Ok((loss, grad))
}

/// Which penalty KL-Cov applies to selected tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlPenaltyKind {
    /// `beta * |log pi(y) - log pi_old(y)|` on the taken token (the paper's
    /// executable pseudo-code; default).
    AbsLogRatio,
    /// `beta * KL(pi_old(.|s) || pi(.|s))`, the exact categorical divergence.
    ExactKl,
}

/// KL-Cov parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlCovParams {
    /// Top proportion of tokens (by covariance) to penalize; `ceil(k * N)`.
    pub k: f64,
    pub beta: f64,
    pub penalty: KlPenaltyKind,
}

/// Indices of the `ceil(k*N)` largest covariances, ties broken by lower batch
/// index.
pub fn select_kl_cov(batch: &[TokenRecord], k: f64) -> Result<Selection, LossError> {
    if !(0.0..=1.0).contains(&k) {
        return Err(LossError::BadProportion(k));
    }
    let n = batch.len();
    let want = ((k * n as f64).ceil() as usize).min(n);
    if want == 0 {
        return Ok(Selection::from_indices(Vec::new(), n, batch));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        batch[b]
            .covariance
            .partial_cmp(&batch[a].covariance)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(Selection::from_indices(
        order[..want].to_vec(),
        n,
        batch,
    ))
}

/// KL-Cov loss: plain ratio objective for everyone, plus a beta-weighted
/// penalty on the selected top-covariance tokens.
pub fn kl_cov_grad(
    policy: &PolicyTable,
    old_policy: &PolicyTable,
    batch: &[TokenRecord],
    params: &KlCovParams,
) -> Result<(f64, LogitGrad, Selection), LossError> {
    if params.beta < 0.0 {
        return Err(LossError::BadCoefficient(params.beta));
    }
    let selection = if params.beta == 0.0 {
        Selection::from_indices(Vec::new(), batch.len(), batch)
    } else {
        select_kl_cov(batch, params.k)?
    };
    let (loss, grad) =
        kl_cov_grad_with_selection(policy, old_policy, batch, params, &selection.indices)?;
    Ok((loss, grad, selection))
}

/// KL-Cov with the penalized index set fixed by the caller.
pub fn kl_cov_grad_with_selection(
    policy: &PolicyTable,
    old_policy: &PolicyTable,
    batch: &[TokenRecord],
    params: &KlCovParams,
    selected: &[usize],
) -> Result<(f64, LogitGrad), LossError> {
    if batch.is_empty() {
        return Err(LossError::BatchTooSmall { needed: 1, got: 0 });
    }
    check_old_log_probs(batch)?;
    let selected: std::collections::BTreeSet<usize> = selected.iter().copied().collect();
    let n = batch.len() as f64;
    let mut cache = RowCache::new(policy);
    let mut old_cache: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut loss = 0.0;
    let mut grad = LogitGrad::new(policy.num_actions());
    for (i, t) in batch.iter().enumerate() {
        let (probs, lps) = {
            let r = cache.get(t.state);
            (r.0.clone(), r.1.clone())
        };
        let lp = lps[t.token as usize];
        let ratio = ratio_at(lp, t.old_log_prob, i)?;
        loss -= ratio * t.advantage / n;
        grad.add_score(t.state, t.token as usize, -ratio * t.advantage / n, &probs);

        if selected.contains(&i) && params.beta > 0.0 {
            match params.penalty {
                KlPenaltyKind::AbsLogRatio => {
                    let diff = lp - t.old_log_prob;
                    loss += params.beta * diff.abs() / n;
                    // Subgradient 0 at the kink.
                    if diff != 0.0 {
                        grad.add_score(
                            t.state,
                            t.token as usize,
                            params.beta * diff.signum() / n,
                            &probs,
                        );
                    }
                }
                KlPenaltyKind::ExactKl => {
                    let old_lps = old_cache
                        .entry(t.state)
                        .or_insert_with(|| log_softmax(old_policy.logits_row(t.state)));
                    loss += params.beta * categorical_kl(old_lps, &lps) / n;
                    // d/dz_a KL(pi_old || pi) = pi_a - pi_old_a
                    let row: Vec<f64> = probs
                        .iter()
                        .zip(old_lps.iter())
                        .map(|(p, olp)| p - olp.exp())
                        .collect();
                    grad.axpy_row(t.state, params.beta / n, &row);
                }
            }
        }
    }
    Ok((loss, grad))
}

fn report(
    before: &PolicyTable,
    after: &PolicyTable,
    touched: impl Iterator<Item = usize>,
    selection: Selection,
    loss: f64,
    grad_norm: f64,
    eta: f64,
) -> UpdateReport {
    let mut deltas = BTreeMap::new();
    for s in touched {
        let d: Vec<f64> = after
            .logits_row(s)
            .iter()
            .zip(before.logits_row(s))
            .map(|(a, b)| a - b)
            .collect();
        deltas.insert(s, d);
    }
    UpdateReport {
        logit_deltas: deltas,
        selection,
        loss,
        grad_norm,
        eta,
    }
}

/// Batch input for [`pg_update`]: either dense per-state advantages (the
/// expectation over actions is computed exactly) or sampled token records.
#[derive(Debug, Clone)]
pub enum PgBatch<'a> {
    ExactExpectation(&'a [StateAdvantages]),
    Sampled(&'a [TokenRecord]),
}

/// One gradient-ascent step on the vanilla policy-gradient objective.
///
/// In exact-expectation mode the per-state gradient is the full sum
/// `sum_a' pi(a') * (1{a'=a} - pi(a)) * A(a')`; with mean-zero advantages this
/// reduces to the closed form `delta z = eta * pi * A`. Sampled mode is the
/// Monte-Carlo estimate, averaged over responses.
pub fn pg_update(
    policy: &PolicyTable,
    batch: PgBatch<'_>,
    eta: f64,
) -> Result<(PolicyTable, UpdateReport), LossError> {
    if eta <= 0.0 {
        return Err(LossError::BadEta(eta));
    }
    let mut grad = LogitGrad::new(policy.num_actions());
    let mut objective = 0.0;
    match batch {
        PgBatch::ExactExpectation(advs) => {
            for sa in advs {
                if sa.values.len() != policy.num_actions() {
                    return Err(LossError::AdvantageShape {
                        state: sa.state,
                        expected: policy.num_actions(),
                        got: sa.values.len(),
                    });
                }
                let probs = policy.action_distribution(sa.state)?.into_vec();
                // Explicit expectation of score * advantage over all actions.
                for (a_sampled, &adv) in sa.values.iter().enumerate() {
                    grad.add_score(sa.state, a_sampled, probs[a_sampled] * adv, &probs);
                }
                objective += probs
                    .iter()
                    .zip(&sa.values)
                    .map(|(p, a)| p * a)
                    .sum::<f64>();
            }
            if !advs.is_empty() {
                objective /= advs.len() as f64;
            }
        }
        PgBatch::Sampled(toks) => {
            if toks.is_empty() {
                return Err(LossError::BatchTooSmall { needed: 1, got: 0 });
            }
            let responses: std::collections::BTreeSet<(usize, usize)> =
                toks.iter().map(|t| (t.prompt, t.response)).collect();
            let r = responses.len() as f64;
            let mut cache = RowCache::new(policy);
            for t in toks {
                let (probs, lps) = {
                    let c = cache.get(t.state);
                    (c.0.clone(), c.1.clone())
                };
                grad.add_score(t.state, t.token as usize, t.advantage / r, &probs);
                objective += lps[t.token as usize] * t.advantage / r;
            }
        }
    }
    let grad_norm = grad.norm();
    let mut updated = policy.clone();
    grad.apply_to(&mut updated, eta)?;
    let touched: Vec<usize> = grad.rows().map(|(s, _)| s).collect();
    let rep = report(
        policy,
        &updated,
        touched.into_iter(),
        Selection::default(),
        -objective,
        grad_norm,
        eta,
    );
    Ok((updated, rep))
}

/// Natural-policy-gradient step in the tabular closed form:
/// `z[s][a] += eta * A(s, a)` for every provided (visited) state; everything
/// else is untouched. No scalar loss exists for this rule (reported as NaN).
pub fn npg_update(
    policy: &PolicyTable,
    advs: &[StateAdvantages],
    eta: f64,
) -> Result<(PolicyTable, UpdateReport), LossError> {
    if eta <= 0.0 {
        return Err(LossError::BadEta(eta));
    }
    let mut updated = policy.clone();
    let mut sq_norm = 0.0;
    for sa in advs {
        if sa.values.len() != policy.num_actions() {
            return Err(LossError::AdvantageShape {
                state: sa.state,
                expected: policy.num_actions(),
                got: sa.values.len(),
            });
        }
        let delta: Vec<f64> = sa.values.iter().map(|a| eta * a).collect();
        updated.add_to_row(sa.state, &delta)?;
        sq_norm += sa.values.iter().map(|a| a * a).sum::<f64>();
    }
    let touched: Vec<usize> = advs.iter().map(|sa| sa.state).collect();
    let rep = report(
        policy,
        &updated,
        touched.into_iter(),
        Selection::default(),
        f64::NAN,
        sq_norm.sqrt(),
        eta,
    );
    Ok((updated, rep))
}
