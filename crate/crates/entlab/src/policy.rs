//! Tabular softmax policies.
//!
//! A [`PolicyTable`] assigns one independent logit parameter `z[s][a]` to every
//! (state, action) pair; action probabilities are `softmax(z[s][·])`. This is
//! exactly the parameterization under which the first-order entropy-change
//! results of [`crate::dynamics`] hold, so everything here is computed in
//! closed form: distributions with max-subtraction, log-probabilities through
//! log-sum-exp, entropies as exact categorical expectations, and the
//! score-function Jacobian `d log pi(a|s) / d z[s][a'] = 1{a=a'} - pi(a'|s)`.
//!
//! [`SequencePolicy`] layers an autoregressive view on top: states enumerate
//! (prompt, truncated prefix) contexts and are materialized lazily on first
//! visit, initialized uniform.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::numeric::{log_softmax, logsumexp, softmax};
use crate::tasks::GroupRollout;

/// Token identifier within a vocabulary.
pub type Token = u32;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("state index {state} out of range (num_states = {num_states})")]
    StateOutOfRange { state: usize, num_states: usize },
    #[error("dimension mismatch: expected {expected} logits, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("num_states and num_actions must be >= 1")]
    EmptyDimensions,
    #[error("non-finite logit at (state {state}, action {action})")]
    NonFiniteLogit { state: usize, action: usize },
    #[error("unknown prompt id {0}")]
    UnknownPrompt(usize),
    #[error("empty response")]
    EmptyResponse,
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { token: Token, vocab: usize },
    #[error("response length {len} exceeds max_len {max_len}")]
    ResponseTooLong { len: usize, max_len: usize },
    #[error("no rollouts supplied")]
    EmptyRollouts,
    #[error("probability vector invalid: {0}")]
    InvalidProbVector(String),
}

/// How to initialize a policy table.
#[derive(Debug, Clone)]
pub enum PolicyInit {
    /// All logits zero: the uniform policy.
    Uniform,
    /// Explicit row-major logit table; must match the declared dimensions.
    Explicit(Vec<f64>),
}

/// Probability vector over actions; entries of a softmax distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    probs: Vec<f64>,
}

impl ProbVector {
    /// Validates that `probs` is a proper distribution: finite entries in
    /// [0, 1] summing to 1 within 1e-12.
    pub fn new(probs: Vec<f64>) -> Result<Self, PolicyError> {
        if probs.is_empty() {
            return Err(PolicyError::InvalidProbVector("empty".into()));
        }
        for (i, p) in probs.iter().enumerate() {
            if !p.is_finite() || *p < 0.0 || *p > 1.0 {
                return Err(PolicyError::InvalidProbVector(format!(
                    "entry {i} = {p} outside [0, 1]"
                )));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(PolicyError::InvalidProbVector(format!(
                "sums to {sum}, not 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.probs[i]
    }
}

/// Dense table of per-(state, action) logits defining a softmax policy.
///
/// Serializes to `{num_states, num_actions, logits}` with the logits as a
/// row-major array; the JSON round-trip is bit-exact for finite doubles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    num_states: usize,
    num_actions: usize,
    logits: Vec<f64>,
}

impl PolicyTable {
    /// Builds a policy table from an initialization spec.
    pub fn new(num_states: usize, num_actions: usize, init: PolicyInit) -> Result<Self, PolicyError> {
        if num_states == 0 || num_actions == 0 {
            return Err(PolicyError::EmptyDimensions);
        }
        let logits = match init {
            PolicyInit::Uniform => vec![0.0; num_states * num_actions],
            PolicyInit::Explicit(table) => {
                if table.len() != num_states * num_actions {
                    return Err(PolicyError::DimensionMismatch {
                        expected: num_states * num_actions,
                        got: table.len(),
                    });
                }
                for (i, v) in table.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(PolicyError::NonFiniteLogit {
                            state: i / num_actions,
                            action: i % num_actions,
                        });
                    }
                }
                table
            }
        };
        Ok(Self {
            num_states,
            num_actions,
            logits,
        })
    }

    /// Uniform policy: all logits zero.
    pub fn uniform(num_states: usize, num_actions: usize) -> Result<Self, PolicyError> {
        Self::new(num_states, num_actions, PolicyInit::Uniform)
    }

    /// Single-state policy with the given probabilities (logits = ln p).
    pub fn bandit_from_probs(probs: &[f64]) -> Result<Self, PolicyError> {
        let logits = probs.iter().map(|p| p.ln()).collect();
        Self::new(1, probs.len(), PolicyInit::Explicit(logits))
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn check_state(&self, state: usize) -> Result<(), PolicyError> {
        if state >= self.num_states {
            return Err(PolicyError::StateOutOfRange {
                state,
                num_states: self.num_states,
            });
        }
        Ok(())
    }

    pub fn logits_row(&self, state: usize) -> &[f64] {
        let off = state * self.num_actions;
        &self.logits[off..off + self.num_actions]
    }

    pub fn logit(&self, state: usize, action: usize) -> f64 {
        self.logits[state * self.num_actions + action]
    }

    pub fn set_logit(&mut self, state: usize, action: usize, value: f64) {
        self.logits[state * self.num_actions + action] = value;
    }

    /// Adds `delta[a]` to every logit of `state`. Errors if the update would
    /// leave a non-finite logit behind.
    pub fn add_to_row(&mut self, state: usize, delta: &[f64]) -> Result<(), PolicyError> {
        self.check_state(state)?;
        if delta.len() != self.num_actions {
            return Err(PolicyError::DimensionMismatch {
                expected: self.num_actions,
                got: delta.len(),
            });
        }
        let off = state * self.num_actions;
        for (a, d) in delta.iter().enumerate() {
            let v = self.logits[off + a] + d;
            if !v.is_finite() {
                return Err(PolicyError::NonFiniteLogit { state, action: a });
            }
            self.logits[off + a] = v;
        }
        Ok(())
    }

    /// Adds a constant to all logits of one state (a softmax no-op).
    pub fn shift_row(&mut self, state: usize, c: f64) -> Result<(), PolicyError> {
        self.check_state(state)?;
        let off = state * self.num_actions;
        for a in 0..self.num_actions {
            self.logits[off + a] += c;
        }
        Ok(())
    }

    /// Appends a new state row, returning its index.
    pub fn push_state(&mut self, row: Vec<f64>) -> Result<usize, PolicyError> {
        if row.len() != self.num_actions {
            return Err(PolicyError::DimensionMismatch {
                expected: self.num_actions,
                got: row.len(),
            });
        }
        self.logits.extend_from_slice(&row);
        self.num_states += 1;
        Ok(self.num_states - 1)
    }

    /// `pi(·|s)` as an exact softmax with max subtraction.
    pub fn action_distribution(&self, state: usize) -> Result<ProbVector, PolicyError> {
        self.check_state(state)?;
        ProbVector::new(softmax(self.logits_row(state)))
    }

    /// Log-probabilities `log pi(·|s)` via log-sum-exp (never as log of a
    /// probability).
    pub fn log_prob_row(&self, state: usize) -> Result<Vec<f64>, PolicyError> {
        self.check_state(state)?;
        Ok(log_softmax(self.logits_row(state)))
    }

    pub fn log_prob(&self, state: usize, action: usize) -> Result<f64, PolicyError> {
        self.check_state(state)?;
        let row = self.logits_row(state);
        Ok(row[action] - logsumexp(row))
    }

    /// Exact categorical entropy `-sum_a pi(a|s) ln pi(a|s)` in nats.
    pub fn state_entropy(&self, state: usize) -> Result<f64, PolicyError> {
        self.check_state(state)?;
        let row = self.logits_row(state);
        let lps = log_softmax(row);
        let mut h = 0.0;
        for lp in lps {
            let p = lp.exp();
            if p > 0.0 {
                h -= p * lp;
            }
        }
        Ok(h.max(0.0))
    }

    /// Score-function Jacobian: entry `(a, a')` is
    /// `d log pi(a|s) / d z[s][a'] = 1{a=a'} - pi(a'|s)`.
    pub fn score_jacobian(&self, state: usize) -> Result<Vec<Vec<f64>>, PolicyError> {
        let probs = self.action_distribution(state)?;
        let n = self.num_actions;
        let mut jac = vec![vec![0.0; n]; n];
        for (a, row) in jac.iter_mut().enumerate() {
            for (a2, cell) in row.iter_mut().enumerate() {
                let indicator = if a == a2 { 1.0 } else { 0.0 };
                *cell = indicator - probs[a2];
            }
        }
        Ok(jac)
    }
}

/// Context key identifying one autoregressive state: a prompt plus the last
/// `context_window` generated tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateKey {
    pub prompt: usize,
    pub prefix: Vec<Token>,
}

/// How [`SequencePolicy::mean_entropy`] aggregates per-token uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntropyMode {
    /// Exact categorical expectation at each visited prefix (default).
    Exact,
    /// Monte-Carlo `-log pi(y_t)` average over the sampled tokens.
    MonteCarlo,
}

/// Tabular autoregressive policy over (prompt, prefix) contexts.
///
/// States are materialized lazily on first visit and initialized uniform;
/// reads on unmaterialized states behave as the uniform distribution, so the
/// reachable-state count never has to be enumerated up front. The mapping
/// between visited [`StateKey`]s and table indices is bijective: encoding then
/// decoding (and vice versa) is the identity.
#[derive(Debug, Clone)]
pub struct SequencePolicy {
    vocab_size: usize,
    max_len: usize,
    context_window: usize,
    table: PolicyTable,
    keys: Vec<StateKey>,
    index: HashMap<StateKey, usize>,
}

impl SequencePolicy {
    pub fn new(vocab_size: usize, max_len: usize, context_window: usize) -> Result<Self, PolicyError> {
        if vocab_size == 0 || max_len == 0 || context_window == 0 {
            return Err(PolicyError::EmptyDimensions);
        }
        Ok(Self {
            vocab_size,
            max_len,
            context_window,
            // Starts empty; table rows stay 1:1 with visited keys.
            table: PolicyTable {
                num_states: 0,
                num_actions: vocab_size,
                logits: Vec::new(),
            },
            keys: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn context_window(&self) -> usize {
        self.context_window
    }

    pub fn num_states(&self) -> usize {
        self.table.num_states
    }

    /// The backing logit table over materialized states.
    pub fn table(&self) -> &PolicyTable {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut PolicyTable {
        &mut self.table
    }

    /// Truncates a full generation prefix to this policy's context window.
    pub fn context_of(&self, prompt: usize, prefix: &[Token]) -> StateKey {
        let start = prefix.len().saturating_sub(self.context_window);
        StateKey {
            prompt,
            prefix: prefix[start..].to_vec(),
        }
    }

    /// Index of a materialized state, if any.
    pub fn lookup(&self, key: &StateKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    /// Decodes a state index back to its context key.
    pub fn state_key(&self, state: usize) -> Option<&StateKey> {
        self.keys.get(state)
    }

    /// Materializes a state (uniform logits) if needed; returns its index.
    pub fn ensure_state(&mut self, key: &StateKey) -> usize {
        if let Some(&i) = self.index.get(key) {
            return i;
        }
        let i = self
            .table
            .push_state(vec![0.0; self.vocab_size])
            .expect("row length matches vocab");
        self.keys.push(key.clone());
        self.index.insert(key.clone(), i);
        i
    }

    fn check_token(&self, token: Token) -> Result<(), PolicyError> {
        if (token as usize) >= self.vocab_size {
            return Err(PolicyError::TokenOutOfVocab {
                token,
                vocab: self.vocab_size,
            });
        }
        Ok(())
    }

    /// Logit row for a context; `None` means "unmaterialized", i.e. uniform.
    pub fn logits_for(&self, prompt: usize, prefix: &[Token]) -> Option<&[f64]> {
        let key = self.context_of(prompt, prefix);
        self.lookup(&key).map(|i| self.table.logits_row(i))
    }

    /// `pi(·|prompt, prefix)`, uniform when the context is unmaterialized.
    pub fn distribution(&self, prompt: usize, prefix: &[Token]) -> ProbVector {
        match self.logits_for(prompt, prefix) {
            Some(row) => ProbVector::new(softmax(row)).expect("softmax of finite logits"),
            None => ProbVector::new(vec![1.0 / self.vocab_size as f64; self.vocab_size])
                .expect("uniform is valid"),
        }
    }

    /// `log pi(token | prompt, prefix)`.
    pub fn token_log_prob(&self, prompt: usize, prefix: &[Token], token: Token) -> Result<f64, PolicyError> {
        self.check_token(token)?;
        match self.logits_for(prompt, prefix) {
            Some(row) => Ok(row[token as usize] - logsumexp(row)),
            None => Ok(-(self.vocab_size as f64).ln()),
        }
    }

    /// Exact entropy of the next-token distribution at a context.
    pub fn context_entropy(&self, prompt: usize, prefix: &[Token]) -> f64 {
        match self.logits_for(prompt, prefix) {
            Some(row) => {
                let lps = log_softmax(row);
                let mut h = 0.0;
                for lp in lps {
                    let p = lp.exp();
                    if p > 0.0 {
                        h -= p * lp;
                    }
                }
                h.max(0.0)
            }
            None => (self.vocab_size as f64).ln(),
        }
    }

    /// Sum (or length-normalized mean) of `log pi(y_t | prefix)` along a
    /// response.
    pub fn sequence_log_prob(
        &self,
        prompt: usize,
        response: &[Token],
        normalize: bool,
    ) -> Result<f64, PolicyError> {
        if response.is_empty() {
            return Err(PolicyError::EmptyResponse);
        }
        if response.len() > self.max_len {
            return Err(PolicyError::ResponseTooLong {
                len: response.len(),
                max_len: self.max_len,
            });
        }
        let mut total = 0.0;
        for (t, &tok) in response.iter().enumerate() {
            total += self.token_log_prob(prompt, &response[..t], tok)?;
        }
        if normalize {
            total /= response.len() as f64;
        }
        Ok(total)
    }

    /// Mean token-level entropy over a batch of rollouts: per response the
    /// per-position values are averaged (the 1/|y| factor), then responses
    /// within a group and finally groups are averaged.
    pub fn mean_entropy(&self, rollouts: &[GroupRollout], mode: EntropyMode) -> Result<f64, PolicyError> {
        if rollouts.is_empty() || rollouts.iter().all(|g| g.responses.is_empty()) {
            return Err(PolicyError::EmptyRollouts);
        }
        let mut group_sum = 0.0;
        let mut group_count = 0usize;
        for group in rollouts {
            if group.responses.is_empty() {
                continue;
            }
            let mut resp_sum = 0.0;
            for response in &group.responses {
                if response.is_empty() {
                    return Err(PolicyError::EmptyResponse);
                }
                let mut tok_sum = 0.0;
                for (t, &tok) in response.iter().enumerate() {
                    tok_sum += match mode {
                        EntropyMode::Exact => self.context_entropy(group.prompt, &response[..t]),
                        EntropyMode::MonteCarlo => {
                            -self.token_log_prob(group.prompt, &response[..t], tok)?
                        }
                    };
                }
                resp_sum += tok_sum / response.len() as f64;
            }
            group_sum += resp_sum / group.responses.len() as f64;
            group_count += 1;
        }
        Ok(group_sum / group_count as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn uniform_init_gives_uniform_distribution() {
        let p = PolicyTable::uniform(1, 4).unwrap();
        let d = p.action_distribution(0).unwrap();
        for a in 0..4 {
            assert_abs_diff_eq!(d[a], 0.25, epsilon = 1e-15);
        }
        assert!(p.logits_row(0).iter().all(|&z| z == 0.0));
    }

    #[test]
    fn explicit_init_symmetric_two_actions() {
        let p = PolicyTable::new(1, 2, PolicyInit::Explicit(vec![0.0, 0.0])).unwrap();
        let d = p.action_distribution(0).unwrap();
        assert_abs_diff_eq!(d[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(d[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn explicit_init_hand_computed_softmax() {
        let p = PolicyTable::new(
            1,
            3,
            PolicyInit::Explicit(vec![6.0_f64.ln(), 3.0_f64.ln(), 1.0_f64.ln()]),
        )
        .unwrap();
        let d = p.action_distribution(0).unwrap();
        assert_abs_diff_eq!(d[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(d[1], 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(d[2], 0.1, epsilon = 1e-12);
    }

    #[test]
    fn init_rejects_bad_inputs() {
        assert!(PolicyTable::uniform(0, 3).is_err());
        assert!(PolicyTable::new(1, 3, PolicyInit::Explicit(vec![0.0; 2])).is_err());
        assert!(PolicyTable::new(1, 2, PolicyInit::Explicit(vec![f64::NAN, 0.0])).is_err());
        assert!(PolicyTable::new(1, 2, PolicyInit::Explicit(vec![f64::INFINITY, 0.0])).is_err());
    }

    #[test]
    fn distribution_large_logits_no_overflow() {
        let p = PolicyTable::new(1, 2, PolicyInit::Explicit(vec![1000.0, 1000.0])).unwrap();
        let d = p.action_distribution(0).unwrap();
        assert_abs_diff_eq!(d[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(d[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn out_of_range_state_errors() {
        let p = PolicyTable::uniform(2, 2).unwrap();
        assert!(p.action_distribution(2).is_err());
        assert!(p.state_entropy(2).is_err());
        assert!(p.score_jacobian(2).is_err());
    }

    #[test]
    fn entropy_uniform_is_ln_v() {
        let p = PolicyTable::uniform(1, 8).unwrap();
        assert_abs_diff_eq!(p.state_entropy(0).unwrap(), 8.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn entropy_degenerate_is_near_zero() {
        // Mass (1 - 1e-12) on one action.
        let p = PolicyTable::new(1, 3, PolicyInit::Explicit(vec![30.0, 0.0, 0.0])).unwrap();
        assert!(p.state_entropy(0).unwrap() < 1e-10);
    }

    #[test]
    fn entropy_hand_computed() {
        let p = PolicyTable::bandit_from_probs(&[0.6, 0.3, 0.1]).unwrap();
        assert_abs_diff_eq!(p.state_entropy(0).unwrap(), 0.897_945_7, epsilon = 1e-7);
    }

    #[test]
    fn jacobian_at_uniform_two_actions() {
        let p = PolicyTable::uniform(1, 2).unwrap();
        let jac = p.score_jacobian(0).unwrap();
        assert_abs_diff_eq!(jac[0][0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(jac[0][1], -0.5, epsilon = 1e-15);
    }

    #[test]
    fn jacobian_rows_sum_to_zero() {
        let p = PolicyTable::bandit_from_probs(&[0.6, 0.3, 0.1]).unwrap();
        let jac = p.score_jacobian(0).unwrap();
        for row in &jac {
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 0.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(jac[1][0], -0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(jac[1][1], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(jac[1][2], -0.1, epsilon = 1e-12);
    }

    #[test]
    fn shift_invariance_of_distribution_and_entropy() {
        let mut p = PolicyTable::bandit_from_probs(&[0.6, 0.3, 0.1]).unwrap();
        let d0 = p.action_distribution(0).unwrap();
        let h0 = p.state_entropy(0).unwrap();
        p.shift_row(0, 13.25).unwrap();
        let d1 = p.action_distribution(0).unwrap();
        let h1 = p.state_entropy(0).unwrap();
        for a in 0..3 {
            assert_abs_diff_eq!(d0[a], d1[a], epsilon = 1e-12);
        }
        assert_abs_diff_eq!(h0, h1, epsilon = 1e-12);
    }

    #[test]
    fn snapshot_json_round_trip_is_bit_exact() {
        let mut p = PolicyTable::uniform(3, 4).unwrap();
        // Awkward magnitudes on purpose.
        let vals = [
            1.0 / 3.0,
            -2.2250738585072014e-308,
            1.7976931348623157e308,
            -0.0,
            5e-324,
            std::f64::consts::PI,
        ];
        for (i, v) in vals.iter().enumerate() {
            p.set_logit(i / 4, i % 4, *v);
        }
        let json = serde_json::to_string(&p).unwrap();
        let back: PolicyTable = serde_json::from_str(&json).unwrap();
        assert_eq!(p.num_states, back.num_states);
        assert_eq!(p.num_actions, back.num_actions);
        for (x, y) in p.logits.iter().zip(back.logits.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn sequence_state_key_round_trip() {
        let mut sp = SequencePolicy::new(4, 6, 3).unwrap();
        let keys = [
            StateKey { prompt: 0, prefix: vec![] },
            StateKey { prompt: 1, prefix: vec![2] },
            StateKey { prompt: 1, prefix: vec![2, 3, 1] },
        ];
        for key in &keys {
            let idx = sp.ensure_state(key);
            assert_eq!(sp.state_key(idx), Some(key));
            assert_eq!(sp.lookup(key), Some(idx));
            // Re-materializing is a no-op.
            assert_eq!(sp.ensure_state(key), idx);
        }
        assert_eq!(sp.num_states(), keys.len());
    }

    #[test]
    fn context_truncation_keeps_last_window_tokens() {
        let sp = SequencePolicy::new(4, 8, 2).unwrap();
        let key = sp.context_of(5, &[1, 2, 3, 0]);
        assert_eq!(key.prefix, vec![3, 0]);
        assert_eq!(key.prompt, 5);
    }

    #[test]
    fn sequence_log_prob_uniform() {
        let sp = SequencePolicy::new(8, 6, 4).unwrap();
        let resp = vec![0, 1, 2, 3, 4];
        let norm = sp.sequence_log_prob(0, &resp, true).unwrap();
        let raw = sp.sequence_log_prob(0, &resp, false).unwrap();
        assert_abs_diff_eq!(norm, -(8.0_f64.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(raw, -5.0 * 8.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn sequence_log_prob_normalization_identity() {
        let mut sp = SequencePolicy::new(3, 5, 3).unwrap();
        let key = sp.context_of(0, &[]);
        let s = sp.ensure_state(&key);
        sp.table_mut().add_to_row(s, &[0.7, -0.2, 0.1]).unwrap();
        let resp = vec![1, 0];
        let raw = sp.sequence_log_prob(0, &resp, false).unwrap();
        let norm = sp.sequence_log_prob(0, &resp, true).unwrap();
        assert_abs_diff_eq!(norm * resp.len() as f64, raw, epsilon = 1e-12);
    }

    #[test]
    fn sequence_log_prob_errors() {
        let sp = SequencePolicy::new(3, 2, 2).unwrap();
        assert!(sp.sequence_log_prob(0, &[], true).is_err());
        assert!(sp.sequence_log_prob(0, &[0, 1, 2], false).is_err());
        assert!(sp.sequence_log_prob(0, &[7], false).is_err());
    }

    #[test]
    fn mean_entropy_of_uniform_policy_is_ln_v() {
        let sp = SequencePolicy::new(8, 4, 4).unwrap();
        let groups = vec![GroupRollout {
            prompt: 0,
            seed: 0,
            responses: vec![vec![0, 1, 2], vec![3, 3, 3]],
            behavior_log_probs: vec![vec![0.0; 3], vec![0.0; 3]],
            rewards: vec![0.0, 1.0],
        }];
        let h = sp.mean_entropy(&groups, EntropyMode::Exact).unwrap();
        assert_abs_diff_eq!(h, 8.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn mean_entropy_averages_over_responses() {
        // Two single-token responses visiting two different states whose
        // entropies are hand-set; the group mean must average them.
        let mut sp = SequencePolicy::new(2, 3, 3).unwrap();
        let root = sp.ensure_state(&sp.context_of(0, &[]));
        sp.table_mut().add_to_row(root, &[2.0, -2.0]).unwrap();
        let h_root = sp.table().state_entropy(root).unwrap();

        let groups = vec![GroupRollout {
            prompt: 0,
            seed: 0,
            responses: vec![vec![0], vec![1]],
            behavior_log_probs: vec![vec![0.0], vec![0.0]],
            rewards: vec![0.0, 1.0],
        }];
        let h = sp.mean_entropy(&groups, EntropyMode::Exact).unwrap();
        assert_abs_diff_eq!(h, h_root, epsilon = 1e-12);

        // Monte-Carlo mode averages -log pi of the taken tokens instead.
        let lp0 = sp.token_log_prob(0, &[], 0).unwrap();
        let lp1 = sp.token_log_prob(0, &[], 1).unwrap();
        let mc = sp.mean_entropy(&groups, EntropyMode::MonteCarlo).unwrap();
        assert_abs_diff_eq!(mc, -(lp0 + lp1) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn mean_entropy_empty_errors() {
        let sp = SequencePolicy::new(2, 3, 3).unwrap();
        assert!(sp.mean_entropy(&[], EntropyMode::Exact).is_err());
    }
}
