//! Reward-to-advantage estimators and prompt filtering.
//!
//! All estimators map a group's K terminal rewards to K per-response
//! advantages; the per-token advantage is the response value broadcast to
//! every position (trajectory-level credit only).

use serde::{Deserialize, Serialize};

use crate::tasks::GroupRollout;

#[derive(Debug, thiserror::Error)]
pub enum AdvantageError {
    #[error("group size must be >= 2, got {0}")]
    GroupTooSmall(usize),
    #[error("zero reward variance in group (should have been filtered)")]
    ZeroVariance,
}

/// Which estimator produced an advantage batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Reinforce,
    Grpo,
    Rloo,
}

/// Per-response advantages for one group, with estimator provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageBatch {
    pub per_response: Vec<f64>,
    pub estimator: Estimator,
}

impl AdvantageBatch {
    /// The advantage of every token of response `i` (constant per response).
    pub fn token_advantage(&self, i: usize) -> f64 {
        self.per_response[i]
    }
}

/// GRPO: standardize the group rewards, `(r_i - mean) / std` with the
/// population (divide-by-K) standard deviation.
pub fn grpo_advantage(rewards: &[f64]) -> Result<Vec<f64>, AdvantageError> {
    let k = rewards.len();
    if k < 2 {
        return Err(AdvantageError::GroupTooSmall(k));
    }
    let mean = rewards.iter().sum::<f64>() / k as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / k as f64;
    if var == 0.0 {
        return Err(AdvantageError::ZeroVariance);
    }
    let std = var.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// RLOO: each response against the mean of the other K-1,
/// `A_i = r_i - mean_{j != i}(r_j)` (no K/(K-1) rescaling).
pub fn rloo_advantage(rewards: &[f64]) -> Result<Vec<f64>, AdvantageError> {
    let k = rewards.len();
    if k < 2 {
        return Err(AdvantageError::GroupTooSmall(k));
    }
    let total: f64 = rewards.iter().sum();
    Ok(rewards
        .iter()
        .map(|r| r - (total - r) / (k as f64 - 1.0))
        .collect())
}

/// Vanilla REINFORCE: the trajectory reward itself, `A_i = r_i`.
pub fn reinforce_advantage(rewards: &[f64]) -> Vec<f64> {
    rewards.to_vec()
}

/// Computes advantages for one group with the chosen estimator.
///
/// `rloo_rescale` multiplies RLOO advantages by (K-1)/K, recovering the
/// group-mean-baseline variant; it is off by default.
pub fn estimate(
    estimator: Estimator,
    rewards: &[f64],
    rloo_rescale: bool,
) -> Result<AdvantageBatch, AdvantageError> {
    let per_response = match estimator {
        Estimator::Reinforce => reinforce_advantage(rewards),
        Estimator::Grpo => grpo_advantage(rewards)?,
        Estimator::Rloo => {
            let mut a = rloo_advantage(rewards)?;
            if rloo_rescale {
                let k = rewards.len() as f64;
                for v in &mut a {
                    *v *= (k - 1.0) / k;
                }
            }
            a
        }
    };
    Ok(AdvantageBatch {
        per_response,
        estimator,
    })
}

/// Result of [`filter_prompts`], flagging how many groups were dropped.
#[derive(Debug, Clone)]
pub struct Filtered {
    pub groups: Vec<GroupRollout>,
    pub dropped_all_correct: usize,
    pub dropped_all_incorrect: usize,
}

impl Filtered {
    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Drops groups whose rewards are all 0 or all 1, preserving the order of
/// survivors. An empty survivor set is allowed (callers flag it).
pub fn filter_prompts(groups: Vec<GroupRollout>) -> Filtered {
    let mut kept = Vec::with_capacity(groups.len());
    let mut all_correct = 0;
    let mut all_incorrect = 0;
    for g in groups {
        if !g.rewards.is_empty() && g.rewards.iter().all(|&r| r == 1.0) {
            all_correct += 1;
        } else if !g.rewards.is_empty() && g.rewards.iter().all(|&r| r == 0.0) {
            all_incorrect += 1;
        } else {
            kept.push(g);
        }
    }
    Filtered {
        groups: kept,
        dropped_all_correct: all_correct,
        dropped_all_incorrect: all_incorrect,
    }
}
