//! Synthetic verifiable-reward sequence tasks and group rollout sampling.
//!
//! A task is a set of prompts, each with a seeded set of accepted token
//! sequences of length `response_len`; the verifier pays 1 for an exact match
//! against the accepted set and 0 otherwise. Difficulty is controlled by the
//! number of targets per prompt relative to the `vocab^len` response space.
//!
//! Rollouts sample `K` responses per prompt autoregressively from
//! `softmax(logits / temperature)` with a per-prompt RNG stream derived as
//! `seed ^ prompt`, so batches are identical whether prompts are rolled out
//! serially or in parallel.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::log_softmax;
use crate::policy::{SequencePolicy, Token};

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("all counts must be >= 1")]
    EmptyDimensions,
    #[error("cannot draw {requested} distinct targets from a space of {space}")]
    ImpossibleTargetCount { requested: u128, space: u128 },
    #[error("prompt id {0} out of range")]
    UnknownPrompt(usize),
    #[error("group size K must be >= 2, got {0}")]
    GroupTooSmall(usize),
    #[error("temperature must be >= 0, got {0}")]
    BadTemperature(f64),
    #[error("empty rollout group")]
    EmptyGroup,
    #[error("bucket edges must be strictly increasing within [0, 1]")]
    BadBucketEdges,
}

/// Coarse task-level difficulty label, derived from the expected accuracy of
/// uniform random guessing (`targets / vocab^len`). The thresholds are an
/// artifact-level convention, not a calibrated quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DifficultyTier {
    Easy,
    Medium,
    Hard,
}

impl DifficultyTier {
    fn from_uniform_accuracy(p: f64) -> Self {
        if p >= 0.2 {
            DifficultyTier::Easy
        } else if p >= 0.02 {
            DifficultyTier::Medium
        } else {
            DifficultyTier::Hard
        }
    }
}

/// Configuration for [`make_task`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub num_prompts: usize,
    pub vocab_size: usize,
    pub response_len: usize,
    pub targets_per_prompt: usize,
    pub seed: u64,
}

/// A synthetic exact-match task: per-prompt accepted response sets.
#[derive(Debug, Serialize, Deserialize)]
pub struct TaskSpec {
    pub num_prompts: usize,
    pub vocab_size: usize,
    pub response_len: usize,
    pub targets: Vec<BTreeSet<Vec<Token>>>,
    pub difficulty_tier: DifficultyTier,
    pub seed: u64,
    /// Count of malformed responses seen by the verifier (diagnostics only).
    #[serde(skip)]
    malformed: AtomicU64,
}

impl Clone for TaskSpec {
    fn clone(&self) -> Self {
        Self {
            num_prompts: self.num_prompts,
            vocab_size: self.vocab_size,
            response_len: self.response_len,
            targets: self.targets.clone(),
            difficulty_tier: self.difficulty_tier,
            seed: self.seed,
            malformed: AtomicU64::new(self.malformed.load(Ordering::Relaxed)),
        }
    }
}

/// K sampled responses for one prompt, with the per-token log-probabilities of
/// the behavior policy recorded at sampling time and verifier rewards.
///
/// Serialized as JSON lines with fields in the order
/// (prompt, seed, responses, behavior_log_probs, rewards).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRollout {
    pub prompt: usize,
    pub seed: u64,
    pub responses: Vec<Vec<Token>>,
    pub behavior_log_probs: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
}

impl GroupRollout {
    /// Mean reward of the group.
    pub fn accuracy(&self) -> f64 {
        if self.rewards.is_empty() {
            return 0.0;
        }
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }
}

/// Builds a task with seeded, reproducible target sets drawn without
/// replacement per prompt.
pub fn make_task(config: &TaskConfig) -> Result<TaskSpec, TaskError> {
    if config.num_prompts == 0
        || config.vocab_size == 0
        || config.response_len == 0
        || config.targets_per_prompt == 0
    {
        return Err(TaskError::EmptyDimensions);
    }
    let space = (config.vocab_size as u128)
        .checked_pow(config.response_len as u32)
        .unwrap_or(u128::MAX);
    if (config.targets_per_prompt as u128) > space {
        return Err(TaskError::ImpossibleTargetCount {
            requested: config.targets_per_prompt as u128,
            space,
        });
    }

    let mut targets = Vec::with_capacity(config.num_prompts);
    for prompt in 0..config.num_prompts {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ prompt as u64);
        let mut set: BTreeSet<Vec<Token>> = BTreeSet::new();
        while set.len() < config.targets_per_prompt {
            let seq: Vec<Token> = (0..config.response_len)
                .map(|_| rng.gen_range(0..config.vocab_size as Token))
                .collect();
            set.insert(seq);
        }
        targets.push(set);
    }

    let p_uniform = config.targets_per_prompt as f64 / space as f64;
    Ok(TaskSpec {
        num_prompts: config.num_prompts,
        vocab_size: config.vocab_size,
        response_len: config.response_len,
        targets,
        difficulty_tier: DifficultyTier::from_uniform_accuracy(p_uniform),
        seed: config.seed,
        malformed: AtomicU64::new(0),
    })
}

impl TaskSpec {
    /// Binary verifier: 1.0 iff `response` is in the prompt's accepted set.
    ///
    /// A pure function of its inputs; malformed responses (wrong length or
    /// out-of-vocabulary tokens) score 0 and bump a diagnostics counter.
    pub fn reward(&self, prompt: usize, response: &[Token]) -> Result<f64, TaskError> {
        if prompt >= self.num_prompts {
            return Err(TaskError::UnknownPrompt(prompt));
        }
        let malformed = response.len() > self.response_len
            || response.iter().any(|&t| (t as usize) >= self.vocab_size);
        if malformed {
            self.malformed.fetch_add(1, Ordering::Relaxed);
            return Ok(0.0);
        }
        Ok(if self.targets[prompt].contains(response) {
            1.0
        } else {
            0.0
        })
    }

    /// Number of malformed responses seen so far.
    pub fn malformed_count(&self) -> u64 {
        self.malformed.load(Ordering::Relaxed)
    }
}

/// Samples one token index by inverse-CDF walk over `probs`.
fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn greedy_index(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Samples `K` responses for one prompt from `softmax(logits / temperature)`.
///
/// `temperature == 0.0` is the greedy limit: every response is the argmax
/// sequence (ties to the lowest token index) with behavior log-prob 0.
/// Deterministic given (policy, seed): the RNG stream is
/// `ChaCha8(seed ^ prompt)`.
pub fn rollout_group(
    policy: &SequencePolicy,
    task: &TaskSpec,
    prompt: usize,
    k: usize,
    temperature: f64,
    seed: u64,
) -> Result<GroupRollout, TaskError> {
    if k < 2 {
        return Err(TaskError::GroupTooSmall(k));
    }
    if !(temperature >= 0.0) {
        return Err(TaskError::BadTemperature(temperature));
    }
    if prompt >= task.num_prompts {
        return Err(TaskError::UnknownPrompt(prompt));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ prompt as u64);
    let len = task.response_len;
    let vocab = task.vocab_size;

    let mut responses = Vec::with_capacity(k);
    let mut logps = Vec::with_capacity(k);
    let mut rewards = Vec::with_capacity(k);
    for _ in 0..k {
        let mut resp: Vec<Token> = Vec::with_capacity(len);
        let mut lp: Vec<f64> = Vec::with_capacity(len);
        for t in 0..len {
            let logits: Vec<f64> = match policy.logits_for(prompt, &resp[..t]) {
                Some(row) => row.to_vec(),
                None => vec![0.0; vocab],
            };
            if temperature == 0.0 {
                let idx = greedy_index(&logits);
                resp.push(idx as Token);
                lp.push(0.0);
            } else {
                let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
                let lps = log_softmax(&scaled);
                let probs: Vec<f64> = lps.iter().map(|l| l.exp()).collect();
                let u: f64 = rng.gen();
                let idx = sample_index(&probs, u);
                resp.push(idx as Token);
                lp.push(lps[idx]);
            }
        }
        rewards.push(task.reward(prompt, &resp)?);
        responses.push(resp);
        logps.push(lp);
    }
    Ok(GroupRollout {
        prompt,
        seed,
        responses,
        behavior_log_probs: logps,
        rewards,
    })
}

/// Greedy (argmax) decode of one response for a prompt.
pub fn greedy_response(policy: &SequencePolicy, task: &TaskSpec, prompt: usize) -> Vec<Token> {
    let mut resp: Vec<Token> = Vec::with_capacity(task.response_len);
    for t in 0..task.response_len {
        let idx = match policy.logits_for(prompt, &resp[..t]) {
            Some(row) => greedy_index(row),
            None => 0,
        };
        resp.push(idx as Token);
    }
    resp
}

/// Assigns each group to the accuracy interval containing its mean reward.
///
/// With edges `[e1, .., em]` the buckets are `[0, e1], (e1, e2], .., (em, 1]`;
/// boundary accuracies land in the lower interval. Returns one bucket index
/// per group (0 = lowest accuracy).
pub fn difficulty_bucket(groups: &[GroupRollout], edges: &[f64]) -> Result<Vec<usize>, TaskError> {
    if edges.is_empty()
        || edges.windows(2).any(|w| w[0] >= w[1])
        || edges.iter().any(|e| *e < 0.0 || *e > 1.0)
    {
        return Err(TaskError::BadBucketEdges);
    }
    let mut out = Vec::with_capacity(groups.len());
    for g in groups {
        if g.rewards.is_empty() {
            return Err(TaskError::EmptyGroup);
        }
        let acc = g.accuracy();
        let bucket = edges.iter().take_while(|e| acc > **e).count();
        out.push(bucket);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::SequencePolicy;

    fn tiny_config() -> TaskConfig {
        TaskConfig {
            num_prompts: 1,
            vocab_size: 2,
            response_len: 1,
            targets_per_prompt: 1,
            seed: 7,
        }
    }

    #[test]
    fn make_task_deterministic_given_seed() {
        let a = make_task(&tiny_config()).unwrap();
        let b = make_task(&tiny_config()).unwrap();
        assert_eq!(a.targets, b.targets);
        assert_eq!(a.targets[0].len(), 1);
        assert!(a.targets[0].iter().all(|t| t.len() == 1 && t[0] < 2));
    }

    #[test]
    fn make_task_independent_prompt_sets() {
        let cfg = TaskConfig {
            num_prompts: 5,
            vocab_size: 4,
            response_len: 3,
            targets_per_prompt: 2,
            seed: 11,
        };
        let task = make_task(&cfg).unwrap();
        assert_eq!(task.targets.len(), 5);
        for set in &task.targets {
            assert_eq!(set.len(), 2);
        }
    }

    #[test]
    fn different_seeds_give_different_target_sets() {
        // Collision-counting oracle: over 100 seed pairs the target sets must
        // differ nearly always (space 4^4 = 256, 3 targets per prompt).
        let mut differing = 0;
        for s in 0..100u64 {
            let mk = |seed| {
                make_task(&TaskConfig {
                    num_prompts: 1,
                    vocab_size: 4,
                    response_len: 4,
                    targets_per_prompt: 3,
                    seed,
                })
                .unwrap()
            };
            if mk(s).targets != mk(s + 1000).targets {
                differing += 1;
            }
        }
        assert!(differing >= 99, "only {differing}/100 seed pairs differed");
    }

    #[test]
    fn impossible_target_count_errors() {
        let cfg = TaskConfig {
            num_prompts: 1,
            vocab_size: 2,
            response_len: 2,
            targets_per_prompt: 5,
            seed: 0,
        };
        assert!(matches!(
            make_task(&cfg),
            Err(TaskError::ImpossibleTargetCount { .. })
        ));
    }

    #[test]
    fn reward_exact_match_only() {
        let cfg = TaskConfig {
            num_prompts: 1,
            vocab_size: 3,
            response_len: 2,
            targets_per_prompt: 1,
            seed: 3,
        };
        let task = make_task(&cfg).unwrap();
        let target = task.targets[0].iter().next().unwrap().clone();
        assert_eq!(task.reward(0, &target).unwrap(), 1.0);
        let mut off = target.clone();
        off[1] = (off[1] + 1) % 3;
        assert_eq!(task.reward(0, &off).unwrap(), 0.0);
        // Repeated calls agree (pure function).
        assert_eq!(task.reward(0, &target).unwrap(), 1.0);
    }

    #[test]
    fn reward_exhaustive_enumeration_counts_targets() {
        let cfg = TaskConfig {
            num_prompts: 1,
            vocab_size: 2,
            response_len: 3,
            targets_per_prompt: 2,
            seed: 5,
        };
        let task = make_task(&cfg).unwrap();
        let mut hits = 0.0;
        for bits in 0..8u32 {
            let resp: Vec<Token> = (0..3).map(|t| (bits >> t) & 1).collect();
            hits += task.reward(0, &resp).unwrap();
        }
        assert_eq!(hits, 2.0);
    }

    #[test]
    fn reward_malformed_scores_zero_and_counts() {
        let task = make_task(&tiny_config()).unwrap();
        assert_eq!(task.reward(0, &[9]).unwrap(), 0.0);
        assert_eq!(task.reward(0, &[0, 0]).unwrap(), 0.0);
        assert_eq!(task.malformed_count(), 2);
        assert!(task.reward(1, &[0]).is_err());
    }

    #[test]
    fn rollout_greedy_limit_returns_argmax_sequence() {
        let cfg = TaskConfig {
            num_prompts: 1,
            vocab_size: 3,
            response_len: 2,
            targets_per_prompt: 1,
            seed: 1,
        };
        let task = make_task(&cfg).unwrap();
        let mut sp = SequencePolicy::new(3, 2, 2).unwrap();
        let root = sp.ensure_state(&sp.context_of(0, &[]));
        sp.table_mut().add_to_row(root, &[0.0, 2.0, 0.0]).unwrap();
        let after = sp.ensure_state(&sp.context_of(0, &[1]));
        sp.table_mut().add_to_row(after, &[0.0, 0.0, 3.0]).unwrap();

        let group = rollout_group(&sp, &task, 0, 4, 0.0, 42).unwrap();
        for resp in &group.responses {
            assert_eq!(resp, &vec![1, 2]);
        }
        assert!(group
            .behavior_log_probs
            .iter()
            .all(|lps| lps.iter().all(|&l| l == 0.0)));
    }

    #[test]
    fn rollout_deterministic_replay() {
        let cfg = TaskConfig {
            num_prompts: 2,
            vocab_size: 4,
            response_len: 3,
            targets_per_prompt: 2,
            seed: 9,
        };
        let task = make_task(&cfg).unwrap();
        let sp = SequencePolicy::new(4, 3, 3).unwrap();
        let a = rollout_group(&sp, &task, 1, 8, 1.0, 77).unwrap();
        let b = rollout_group(&sp, &task, 1, 8, 1.0, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rollout_uniform_frequency_matches_binomial() {
        let cfg = TaskConfig {
            num_prompts: 1,
            vocab_size: 2,
            response_len: 1,
            targets_per_prompt: 1,
            seed: 0,
        };
        let task = make_task(&cfg).unwrap();
        let sp = SequencePolicy::new(2, 1, 1).unwrap();
        let group = rollout_group(&sp, &task, 0, 10_000, 1.0, 1234).unwrap();
        let ones = group
            .responses
            .iter()
            .filter(|r| r[0] == 1)
            .count() as f64;
        let freq = ones / 10_000.0;
        // 3 sigma for a fair coin over 10^4 draws: sigma = 0.005.
        assert!((freq - 0.5).abs() <= 3.0 * 0.005, "freq = {freq}");
    }

    #[test]
    fn rollout_sampling_matches_distribution_chi_square() {
        // Chi-square goodness of fit on >= 10^4 samples, 4 actions.
        // Critical value for df = 3 at p = 0.001 is 16.266.
        let cfg = TaskConfig {
            num_prompts: 1,
            vocab_size: 4,
            response_len: 1,
            targets_per_prompt: 1,
            seed: 0,
        };
        let task = make_task(&cfg).unwrap();
        let mut sp = SequencePolicy::new(4, 1, 1).unwrap();
        let root = sp.ensure_state(&sp.context_of(0, &[]));
        sp.table_mut()
            .add_to_row(root, &[0.4, -0.3, 0.9, 0.0])
            .unwrap();
        let probs = sp.distribution(0, &[]);

        let n = 20_000usize;
        let group = rollout_group(&sp, &task, 0, n, 1.0, 2024).unwrap();
        let mut counts = [0usize; 4];
        for r in &group.responses {
            counts[r[0] as usize] += 1;
        }
        let chi2: f64 = (0..4)
            .map(|a| {
                let expected = probs[a] * n as f64;
                let d = counts[a] as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 16.266, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn rollout_behavior_log_probs_use_temperature() {
        let cfg = TaskConfig {
            num_prompts: 1,
            vocab_size: 2,
            response_len: 1,
            targets_per_prompt: 1,
            seed: 0,
        };
        let task = make_task(&cfg).unwrap();
        let mut sp = SequencePolicy::new(2, 1, 1).unwrap();
        let root = sp.ensure_state(&sp.context_of(0, &[]));
        sp.table_mut().add_to_row(root, &[1.0, 0.0]).unwrap();

        let temp = 2.0;
        let group = rollout_group(&sp, &task, 0, 16, temp, 5).unwrap();
        let lps = log_softmax(&[1.0 / temp, 0.0 / temp]);
        for (resp, lp) in group.responses.iter().zip(&group.behavior_log_probs) {
            assert_eq!(lp[0], lps[resp[0] as usize]);
        }
    }

    #[test]
    fn rollout_rejects_small_groups() {
        let task = make_task(&tiny_config()).unwrap();
        let sp = SequencePolicy::new(2, 1, 1).unwrap();
        assert!(matches!(
            rollout_group(&sp, &task, 0, 1, 1.0, 0),
            Err(TaskError::GroupTooSmall(1))
        ));
    }

    fn group_with_rewards(rewards: &[f64]) -> GroupRollout {
        GroupRollout {
            prompt: 0,
            seed: 0,
            responses: vec![vec![0]; rewards.len()],
            behavior_log_probs: vec![vec![0.0]; rewards.len()],
            rewards: rewards.to_vec(),
        }
    }

    #[test]
    fn difficulty_bucket_assignments() {
        let edges = [1.0 / 3.0, 2.0 / 3.0];
        let groups = vec![
            group_with_rewards(&[1.0, 1.0, 1.0, 1.0]),
            group_with_rewards(&[0.0, 0.0, 0.0, 0.0]),
            group_with_rewards(&[1.0, 0.0, 1.0, 0.0]),
        ];
        let buckets = difficulty_bucket(&groups, &edges).unwrap();
        assert_eq!(buckets, vec![2, 0, 1]);
    }

    #[test]
    fn difficulty_bucket_boundary_goes_low() {
        let edges = [0.5];
        let groups = vec![group_with_rewards(&[1.0, 0.0])];
        assert_eq!(difficulty_bucket(&groups, &edges).unwrap(), vec![0]);
    }

    #[test]
    fn difficulty_bucket_rejects_bad_edges() {
        let groups = vec![group_with_rewards(&[1.0, 0.0])];
        assert!(difficulty_bucket(&groups, &[0.5, 0.5]).is_err());
        assert!(difficulty_bucket(&groups, &[]).is_err());
        assert!(difficulty_bucket(&groups, &[1.5]).is_err());
    }

    #[test]
    fn difficulty_bucket_empty_group_errors() {
        let groups = vec![group_with_rewards(&[])];
        assert!(difficulty_bucket(&groups, &[0.5]).is_err());
    }

    #[test]
    fn task_json_round_trip() {
        let task = make_task(&TaskConfig {
            num_prompts: 3,
            vocab_size: 4,
            response_len: 2,
            targets_per_prompt: 2,
            seed: 42,
        })
        .unwrap();
        let json = serde_json::to_string(&task).unwrap();
        let back: TaskSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(task.targets, back.targets);
        assert_eq!(task.difficulty_tier, back.difficulty_tier);
    }
}
