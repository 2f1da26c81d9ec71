//! The experiment loop: rollout -> filter -> advantage -> loss/update, with
//! per-step instrumentation and deterministic seeded outputs.
//!
//! A run writes into its output directory:
//! * `manifest.json` — resolved config plus code version;
//! * `steps.csv` — one instrumentation row per step (measured before the
//!   step's update);
//! * `updates.jsonl` — one summary line per applied inner update;
//! * `dynamics.csv` — per-step first-order entropy-change prediction vs. the
//!   measured change on the frozen batch states;
//! * `covariances.csv` — token covariances of the first inner epoch at the
//!   configured report step.
//!
//! Everything is a pure function of (config, seed): RNG streams derive from
//! the run seed via splitmix lanes, and no iteration order depends on hash
//! maps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{Algorithm, LossKind, RunConfig};
use super::io::{
    dynamics_line, read_steps_csv, step_record_line, write_fit_json, LineWriter,
    COVARIANCES_HEADER, DYNAMICS_HEADER, PREDICTIONS_HEADER, STEPS_HEADER,
};
use super::HarnessError;
use crate::advantage::{estimate, Estimator};
use crate::dynamics::{
    batch_covariance, lemma1_predict, theorem_predict, uniform_weights, weighted_entropy,
    EntropyDeltaPrediction, StateWeight, StepRecord, UpdateRule,
};
use crate::fitlab::{fit_exponential, predict_with_rmse, FitResult};
use crate::losses::{
    clip_cov_grad, entropy_reg_grad, kl_cov_grad, npg_update, pg_update, ppo_clip_grad,
    refresh_batch, ClipCovParams, ClipRange, KlCovParams, LogitGrad, PgBatch, Selection,
    StateAdvantages, TokenRecord,
};
use crate::numeric::mix_seed;
use crate::policy::{SequencePolicy, Token};
use crate::tasks::{difficulty_bucket, greedy_response, make_task, rollout_group, TaskConfig};

/// In-memory view of a finished run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub steps: Vec<StepRecord>,
    pub dynamics: Vec<EntropyDeltaPrediction>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'a str,
    out_dir: String,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct UpdateLine {
    step: usize,
    loss: f64,
    grad_norm: f64,
    n_selected: usize,
    selected_cov_min: f64,
    selected_cov_max: f64,
}

fn estimator_of(algorithm: Algorithm) -> Estimator {
    match algorithm {
        Algorithm::Grpo => Estimator::Grpo,
        Algorithm::Rloo => Estimator::Rloo,
        Algorithm::Reinforce => Estimator::Reinforce,
    }
}

/// Empirical state weights of a token batch: per response the positions carry
/// the 1/|y| factor, responses and groups average uniformly.
fn state_weights(tokens: &[TokenRecord], resp_lens: &BTreeMap<(usize, usize), usize>) -> Vec<StateWeight> {
    let responses = resp_lens.len() as f64;
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for t in tokens {
        let len = resp_lens[&(t.prompt, t.response)] as f64;
        *acc.entry(t.state).or_insert(0.0) += 1.0 / (len * responses);
    }
    acc.into_iter()
        .map(|(state, weight)| StateWeight { state, weight })
        .collect()
}

/// Executes a configured run, writing all outputs into `out_dir`.
pub fn run_experiment(config: &RunConfig, out_dir: &Path) -> Result<RunOutput, HarnessError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| HarnessError::io(out_dir.display().to_string(), e))?;

    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        out_dir: out_dir.display().to_string(),
        config,
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )
    .map_err(|e| HarnessError::io(out_dir.display().to_string(), e))?;

    let task = make_task(&TaskConfig {
        num_prompts: config.num_prompts,
        vocab_size: config.vocab_size,
        response_len: config.response_len,
        targets_per_prompt: config.targets_per_prompt,
        seed: mix_seed(config.seed, 0, 0),
    })?;
    let mut policy = SequencePolicy::new(
        config.vocab_size,
        config.response_len,
        config.context_window,
    )?;

    let mut steps_csv = LineWriter::create(&out_dir.join("steps.csv"), STEPS_HEADER)?;
    let mut updates_jsonl = LineWriter::create(&out_dir.join("updates.jsonl"), "")?;
    let mut dynamics_csv = LineWriter::create(&out_dir.join("dynamics.csv"), DYNAMICS_HEADER)?;
    let mut covariances_csv =
        LineWriter::create(&out_dir.join("covariances.csv"), COVARIANCES_HEADER)?;
    let mut covariances_dumped = false;

    let estimator = estimator_of(config.algorithm);
    let edges = [config.bucket_edge_low, config.bucket_edge_high];
    let exact_bandit = config.response_len == 1
        && matches!(config.loss, LossKind::Pg | LossKind::Npg);

    let mut step_records = Vec::with_capacity(config.steps);
    let mut dynamics_records = Vec::new();

    for step in 0..config.steps {
        let rollout_seed = mix_seed(config.seed, step as u64 + 1, 0);
        let mut groups = Vec::with_capacity(config.num_prompts);
        for prompt in 0..config.num_prompts {
            groups.push(rollout_group(
                &policy,
                &task,
                prompt,
                config.group_size,
                config.temperature,
                rollout_seed,
            )?);
        }

        // Instrumentation, all measured before this step's update.
        let train_acc =
            groups.iter().map(|g| g.accuracy()).sum::<f64>() / groups.len() as f64;
        let cov = batch_covariance(&groups, &policy)?;
        let buckets = difficulty_bucket(&groups, &edges)?;
        let bucket_mean = |which: usize| {
            let vals: Vec<f64> = buckets
                .iter()
                .zip(&cov.per_group)
                .filter(|(b, _)| **b == which)
                .map(|(_, c)| *c)
                .collect();
            if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        let entropy = policy.mean_entropy(&groups, config.entropy_mode)?;
        let mut val_hits = 0.0;
        for prompt in 0..config.num_prompts {
            let resp = greedy_response(&policy, &task, prompt);
            val_hits += task.reward(prompt, &resp)?;
        }
        let record = StepRecord {
            step,
            entropy,
            cov_mean: cov.mean,
            train_acc,
            val_reward: val_hits / config.num_prompts as f64,
            resp_len: config.response_len as f64,
            cov_easy: bucket_mean(2),
            cov_mid: bucket_mean(1),
            cov_hard: bucket_mean(0),
        };
        steps_csv.write_line(&step_record_line(&record))?;
        step_records.push(record);

        // Update phase.
        let dynamics_row = if exact_bandit {
            Some(exact_bandit_step(config, &task, &mut policy, step, &mut updates_jsonl)?)
        } else {
            surrogate_step(
                config,
                &mut policy,
                groups,
                step,
                estimator,
                &mut updates_jsonl,
                &mut covariances_csv,
                &mut covariances_dumped,
            )?
        };
        if let Some(row) = dynamics_row {
            dynamics_csv.write_line(&dynamics_line(&row))?;
            dynamics_records.push(row);
        }
    }

    steps_csv.finish()?;
    updates_jsonl.finish()?;
    dynamics_csv.finish()?;
    covariances_csv.finish()?;
    Ok(RunOutput {
        dir: out_dir.to_path_buf(),
        steps: step_records,
        dynamics: dynamics_records,
    })
}

fn update_line(step: usize, loss: f64, grad_norm: f64, selection: &Selection) -> UpdateLine {
    UpdateLine {
        step,
        loss,
        grad_norm,
        n_selected: selection.indices.len(),
        selected_cov_min: selection.cov_min,
        selected_cov_max: selection.cov_max,
    }
}

/// Exact-expectation bandit update (response_len = 1, loss pg/npg): the
/// per-action advantage is computed exactly from the verifier and the
/// theorem-level prediction is recorded alongside the lemma-level one.
fn exact_bandit_step(
    config: &RunConfig,
    task: &crate::tasks::TaskSpec,
    policy: &mut SequencePolicy,
    step: usize,
    updates_jsonl: &mut LineWriter,
) -> Result<EntropyDeltaPrediction, HarnessError> {
    let mut states = Vec::with_capacity(config.num_prompts);
    for prompt in 0..config.num_prompts {
        let key = policy.context_of(prompt, &[]);
        states.push(policy.ensure_state(&key));
    }
    let mut advs = Vec::with_capacity(states.len());
    for (prompt, &state) in states.iter().enumerate() {
        let probs = policy.table().action_distribution(state)?;
        let rewards: Vec<f64> = (0..config.vocab_size)
            .map(|a| task.reward(prompt, &[a as Token]))
            .collect::<Result<_, _>>()?;
        let baseline: f64 = probs
            .as_slice()
            .iter()
            .zip(&rewards)
            .map(|(p, r)| p * r)
            .sum();
        advs.push(StateAdvantages {
            state,
            values: rewards.iter().map(|r| r - baseline).collect(),
        });
    }
    let weights = uniform_weights(&states);
    let rule = match config.loss {
        LossKind::Pg => UpdateRule::Pg,
        _ => UpdateRule::Npg,
    };
    let h_before = weighted_entropy(policy.table(), &weights)?;
    let pred_theorem = theorem_predict(policy.table(), &advs, config.eta, rule, &weights)?;
    let snapshot = policy.table().clone();
    let (updated, report) = match rule {
        UpdateRule::Pg => pg_update(&snapshot, PgBatch::ExactExpectation(&advs), config.eta)?,
        UpdateRule::Npg => npg_update(&snapshot, &advs, config.eta)?,
    };
    *policy.table_mut() = updated;
    updates_jsonl.write_json(&update_line(
        step,
        report.loss,
        report.grad_norm,
        &report.selection,
    ))?;

    let pred_lemma1 = lemma1_predict(&snapshot, policy.table(), &weights)?;
    let measured = weighted_entropy(policy.table(), &weights)? - h_before;
    Ok(EntropyDeltaPrediction {
        step,
        eta: config.eta,
        pred_lemma1,
        pred_theorem,
        measured,
        abs_err: (measured - pred_lemma1).abs(),
    })
}

/// Surrogate-loss update over the rollout token batch, reused for
/// `inner_epochs` updates with old log-probs frozen at rollout time.
///
/// The batch keeps its nominal size across steps: groups dropped by the
/// all-correct/all-incorrect filter stay in as zero-advantage padding (they
/// contribute no gradient), mirroring fixed-batch training where filtered
/// prompts are replaced rather than the batch shrunk. Without this the
/// effective step size and the covariance selection counts would swing by
/// orders of magnitude as the filter tightens late in training.
#[allow(clippy::too_many_arguments)]
fn surrogate_step(
    config: &RunConfig,
    policy: &mut SequencePolicy,
    groups: Vec<crate::tasks::GroupRollout>,
    step: usize,
    estimator: Estimator,
    updates_jsonl: &mut LineWriter,
    covariances_csv: &mut LineWriter,
    covariances_dumped: &mut bool,
) -> Result<Option<EntropyDeltaPrediction>, HarnessError> {
    let degenerate_rewards = |g: &crate::tasks::GroupRollout| {
        g.rewards.iter().all(|&r| r == 0.0) || g.rewards.iter().all(|&r| r == 1.0)
    };
    if groups.iter().all(degenerate_rewards) {
        // The whole batch carries zero advantage; the update is a no-op.
        return Ok(None);
    }

    // Materialize every visited prefix state, then freeze the old policy.
    let mut tokens: Vec<TokenRecord> = Vec::new();
    let mut resp_lens: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for g in &groups {
        let adv = if degenerate_rewards(g) {
            None
        } else {
            Some(estimate(estimator, &g.rewards, config.rloo_rescale)?)
        };
        for (ri, resp) in g.responses.iter().enumerate() {
            resp_lens.insert((g.prompt, ri), resp.len());
            for (t, &tok) in resp.iter().enumerate() {
                let key = policy.context_of(g.prompt, &resp[..t]);
                let state = policy.ensure_state(&key);
                tokens.push(TokenRecord {
                    prompt: g.prompt,
                    response: ri,
                    position: t,
                    token: tok,
                    state,
                    old_log_prob: f64::NAN,
                    cur_log_prob: f64::NAN,
                    advantage: adv.as_ref().map_or(0.0, |a| a.token_advantage(ri)),
                    covariance: 0.0,
                });
            }
        }
    }
    if tokens.len() < 2 {
        return Ok(None);
    }
    let snapshot = policy.table().clone();
    for t in &mut tokens {
        t.old_log_prob = snapshot.log_prob(t.state, t.token as usize)?;
    }
    let weights = state_weights(&tokens, &resp_lens);
    let h_before = weighted_entropy(&snapshot, &weights)?;

    let epochs = match config.loss {
        // Plain policy gradient is on-policy: one update per rollout batch.
        LossKind::Pg => 1,
        _ => config.inner_epochs,
    };
    let clip = ClipRange {
        low: config.eps,
        high: match config.loss {
            LossKind::ClipHigher => config.eps_high,
            _ => config.eps,
        },
    };

    for epoch in 0..epochs {
        refresh_batch(policy.table(), &mut tokens)?;
        if !*covariances_dumped && step >= config.cov_report_step {
            for t in &tokens {
                covariances_csv.write_line(&super::io::fmt_f64(t.covariance))?;
            }
            *covariances_dumped = true;
        }

        let (loss, grad, selection): (f64, LogitGrad, Selection) = match config.loss {
            LossKind::Pg => {
                let (updated, report) =
                    pg_update(policy.table(), PgBatch::Sampled(&tokens), config.eta)?;
                *policy.table_mut() = updated;
                updates_jsonl.write_json(&update_line(
                    step,
                    report.loss,
                    report.grad_norm,
                    &report.selection,
                ))?;
                continue;
            }
            LossKind::PpoClip | LossKind::ClipHigher => {
                let (l, g) = ppo_clip_grad(policy.table(), &tokens, clip)?;
                (l, g, Selection::default())
            }
            LossKind::EntropyReg => {
                let (l, g) =
                    entropy_reg_grad(policy.table(), &tokens, clip, config.entropy_alpha)?;
                (l, g, Selection::default())
            }
            LossKind::RefKl => {
                // The reference snapshot is the initial policy, which is
                // uniform at every state by construction.
                let reference =
                    crate::policy::PolicyTable::uniform(
                        policy.table().num_states(),
                        policy.table().num_actions(),
                    )?;
                let (l, g) = crate::losses::ref_kl_grad(
                    policy.table(),
                    &reference,
                    &tokens,
                    clip,
                    config.ref_kl_beta,
                )?;
                (l, g, Selection::default())
            }
            LossKind::ClipCov => {
                let params = ClipCovParams {
                    ratio: config.clip_cov_ratio,
                    cov_low: config.cov_low,
                    cov_high: config.cov_high,
                    seed: mix_seed(config.seed, step as u64 + 1, epoch as u64 + 1),
                };
                let (l, g, s) = clip_cov_grad(policy.table(), &tokens, clip, &params)?;
                (l, g, s)
            }
            LossKind::KlCov => {
                let params = KlCovParams {
                    k: config.kl_cov_k,
                    beta: config.kl_cov_beta,
                    penalty: config.kl_penalty,
                };
                let (l, g, s) = kl_cov_grad(policy.table(), &snapshot, &tokens, &params)?;
                (l, g, s)
            }
            LossKind::Npg => unreachable!("validated: npg runs use the bandit path"),
        };
        let grad_norm = grad.norm();
        grad.apply_to(policy.table_mut(), -config.eta)?;
        updates_jsonl.write_json(&update_line(step, loss, grad_norm, &selection))?;
    }

    let h_after = weighted_entropy(policy.table(), &weights)?;
    let pred_lemma1 = lemma1_predict(&snapshot, policy.table(), &weights)?;
    let measured = h_after - h_before;
    Ok(Some(EntropyDeltaPrediction {
        step,
        eta: config.eta,
        pred_lemma1,
        pred_theorem: f64::NAN,
        measured,
        abs_err: (measured - pred_lemma1).abs(),
    }))
}

/// Result of [`fit_and_predict`].
#[derive(Debug, Clone)]
pub struct FitPrediction {
    pub fit: FitResult,
    /// RMSE over the predicted segment (the whole run when the fit fraction
    /// is 1.0).
    pub heldout_rmse: f64,
    pub n_fit: usize,
    pub n_predicted: usize,
}

/// Fits the entropy/performance law on the first `fraction` of a run's steps
/// and predicts the remainder, writing `fit.json` and `predictions.csv` into
/// the run directory.
pub fn fit_and_predict(run_dir: &Path, fraction: f64) -> Result<FitPrediction, HarnessError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(HarnessError::Config(format!(
            "fit fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let steps_path = run_dir.join("steps.csv");
    let records = read_steps_csv(&steps_path)?;
    if records.len() < 10 {
        return Err(HarnessError::Malformed {
            path: steps_path.display().to_string(),
            reason: format!("need at least 10 rows to fit, got {}", records.len()),
        });
    }
    let cut = ((fraction * records.len() as f64).ceil() as usize).clamp(2, records.len());
    let fit_points: Vec<(f64, f64)> = records[..cut]
        .iter()
        .map(|r| (r.entropy, r.val_reward))
        .collect();
    let fit = fit_exponential(&fit_points)?;

    let predicted = if cut < records.len() {
        &records[cut..]
    } else {
        &records[..]
    };
    let hs: Vec<f64> = predicted.iter().map(|r| r.entropy).collect();
    let truths: Vec<f64> = predicted.iter().map(|r| r.val_reward).collect();
    let (_, heldout_rmse) = predict_with_rmse(&fit, &hs, &truths)?;

    let mut pred_csv = LineWriter::create(&run_dir.join("predictions.csv"), PREDICTIONS_HEADER)?;
    for r in &records {
        let pred = -fit.a * r.entropy.exp() + fit.b;
        pred_csv.write_line(&format!(
            "{},{},{},{}",
            r.step,
            super::io::fmt_f64(r.entropy),
            super::io::fmt_f64(r.val_reward),
            super::io::fmt_f64(pred),
        ))?;
    }
    pred_csv.finish()?;
    write_fit_json(&run_dir.join("fit.json"), &fit)?;

    Ok(FitPrediction {
        fit,
        heldout_rmse,
        n_fit: cut,
        n_predicted: predicted.len(),
    })
}
