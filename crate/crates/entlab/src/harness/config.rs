//! Run configuration: defaults, flat key=value parsing, and overrides.
//!
//! The config file format is intentionally flat (`key = value`, `#` comments)
//! so resolved manifests diff cleanly. Every key can also be overridden on the
//! command line via repeated `--set key=value`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::losses::KlPenaltyKind;
use crate::policy::EntropyMode;

/// Advantage estimator used on group rewards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Grpo,
    Rloo,
    Reinforce,
}

/// Which loss / update rule drives the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Pg,
    Npg,
    PpoClip,
    ClipHigher,
    EntropyReg,
    RefKl,
    ClipCov,
    KlCov,
}

/// Fully resolved experiment configuration.
///
/// Defaults follow the reference hyperparameters where they transfer to the
/// tabular setting (K = 8 responses per prompt, eps = 0.2, eps_high = 0.28,
/// r = 2e-4 with covariance bounds [1, 5], k = 2e-3, beta = 1, 8 inner
/// updates per rollout, temperature 1). The learning rate is retuned for the
/// tabular scale: the LLM-scale 5e-7 moves desk-size logit tables by nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    // Task shape.
    pub num_prompts: usize,
    pub vocab_size: usize,
    pub response_len: usize,
    pub targets_per_prompt: usize,
    pub context_window: usize,
    // Algorithm selection.
    pub algorithm: Algorithm,
    pub loss: LossKind,
    // Hyperparameters.
    pub eta: f64,
    pub group_size: usize,
    pub eps: f64,
    pub eps_high: f64,
    pub entropy_alpha: f64,
    pub ref_kl_beta: f64,
    pub clip_cov_ratio: f64,
    pub cov_low: f64,
    pub cov_high: f64,
    pub kl_cov_k: f64,
    pub kl_cov_beta: f64,
    pub kl_penalty: KlPenaltyKind,
    pub inner_epochs: usize,
    pub steps: usize,
    pub temperature: f64,
    pub seed: u64,
    pub rloo_rescale: bool,
    pub entropy_mode: EntropyMode,
    pub bucket_edge_low: f64,
    pub bucket_edge_high: f64,
    /// Step whose first-inner-epoch token covariances are dumped to
    /// `covariances.csv` (first non-empty batch at or after it).
    pub cov_report_step: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            num_prompts: 1024,
            vocab_size: 4,
            response_len: 4,
            targets_per_prompt: 12,
            context_window: 4,
            algorithm: Algorithm::Grpo,
            loss: LossKind::PpoClip,
            eta: 300.0,
            group_size: 8,
            eps: 0.2,
            eps_high: 0.28,
            entropy_alpha: 5e-3,
            ref_kl_beta: 1e-2,
            clip_cov_ratio: 2e-4,
            cov_low: 1.0,
            cov_high: 5.0,
            kl_cov_k: 2e-3,
            kl_cov_beta: 1.0,
            kl_penalty: KlPenaltyKind::AbsLogRatio,
            inner_epochs: 8,
            steps: 300,
            temperature: 1.0,
            seed: 0,
            rloo_rescale: false,
            entropy_mode: EntropyMode::Exact,
            bucket_edge_low: 1.0 / 3.0,
            bucket_edge_high: 2.0 / 3.0,
            cov_report_step: 10,
        }
    }
}

/// Every assignable config key, in file order.
pub const CONFIG_KEYS: &[&str] = &[
    "num_prompts",
    "vocab_size",
    "response_len",
    "targets_per_prompt",
    "context_window",
    "algorithm",
    "loss",
    "eta",
    "group_size",
    "eps",
    "eps_high",
    "entropy_alpha",
    "ref_kl_beta",
    "clip_cov_ratio",
    "cov_low",
    "cov_high",
    "kl_cov_k",
    "kl_cov_beta",
    "kl_penalty",
    "inner_epochs",
    "steps",
    "temperature",
    "seed",
    "rloo_rescale",
    "entropy_mode",
    "bucket_edge_low",
    "bucket_edge_high",
    "cov_report_step",
];

fn bad(key: &str, value: &str) -> HarnessError {
    HarnessError::Config(format!("invalid value for {key}: {value:?}"))
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let v = value.trim();
        match key {
            "num_prompts" => self.num_prompts = v.parse().map_err(|_| bad(key, v))?,
            "vocab_size" => self.vocab_size = v.parse().map_err(|_| bad(key, v))?,
            "response_len" => self.response_len = v.parse().map_err(|_| bad(key, v))?,
            "targets_per_prompt" => self.targets_per_prompt = v.parse().map_err(|_| bad(key, v))?,
            "context_window" => self.context_window = v.parse().map_err(|_| bad(key, v))?,
            "algorithm" => {
                self.algorithm = match v {
                    "grpo" => Algorithm::Grpo,
                    "rloo" => Algorithm::Rloo,
                    "reinforce" => Algorithm::Reinforce,
                    _ => return Err(bad(key, v)),
                }
            }
            "loss" => {
                self.loss = match v {
                    "pg" => LossKind::Pg,
                    "npg" => LossKind::Npg,
                    "ppo_clip" => LossKind::PpoClip,
                    "clip_higher" => LossKind::ClipHigher,
                    "entropy_reg" => LossKind::EntropyReg,
                    "ref_kl" => LossKind::RefKl,
                    "clip_cov" => LossKind::ClipCov,
                    "kl_cov" => LossKind::KlCov,
                    _ => return Err(bad(key, v)),
                }
            }
            "eta" => self.eta = v.parse().map_err(|_| bad(key, v))?,
            "group_size" => self.group_size = v.parse().map_err(|_| bad(key, v))?,
            "eps" => self.eps = v.parse().map_err(|_| bad(key, v))?,
            "eps_high" => self.eps_high = v.parse().map_err(|_| bad(key, v))?,
            "entropy_alpha" => self.entropy_alpha = v.parse().map_err(|_| bad(key, v))?,
            "ref_kl_beta" => self.ref_kl_beta = v.parse().map_err(|_| bad(key, v))?,
            "clip_cov_ratio" => self.clip_cov_ratio = v.parse().map_err(|_| bad(key, v))?,
            "cov_low" => self.cov_low = v.parse().map_err(|_| bad(key, v))?,
            "cov_high" => self.cov_high = v.parse().map_err(|_| bad(key, v))?,
            "kl_cov_k" => self.kl_cov_k = v.parse().map_err(|_| bad(key, v))?,
            "kl_cov_beta" => self.kl_cov_beta = v.parse().map_err(|_| bad(key, v))?,
            "kl_penalty" => {
                self.kl_penalty = match v {
                    "abs-logratio" => KlPenaltyKind::AbsLogRatio,
                    "exact-kl" => KlPenaltyKind::ExactKl,
                    _ => return Err(bad(key, v)),
                }
            }
            "inner_epochs" => self.inner_epochs = v.parse().map_err(|_| bad(key, v))?,
            "steps" => self.steps = v.parse().map_err(|_| bad(key, v))?,
            "temperature" => self.temperature = v.parse().map_err(|_| bad(key, v))?,
            "seed" => self.seed = v.parse().map_err(|_| bad(key, v))?,
            "rloo_rescale" => self.rloo_rescale = v.parse().map_err(|_| bad(key, v))?,
            "entropy_mode" => {
                self.entropy_mode = match v {
                    "exact" => EntropyMode::Exact,
                    "mc" => EntropyMode::MonteCarlo,
                    _ => return Err(bad(key, v)),
                }
            }
            "bucket_edge_low" => self.bucket_edge_low = v.parse().map_err(|_| bad(key, v))?,
            "bucket_edge_high" => self.bucket_edge_high = v.parse().map_err(|_| bad(key, v))?,
            "cov_report_step" => self.cov_report_step = v.parse().map_err(|_| bad(key, v))?,
            _ => return Err(HarnessError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a flat `key = value` config file over the defaults.
    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::io(path.display().to_string(), e))?;
        let mut config = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!(
                    "{}:{}: expected key = value, got {line:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            config.set(key.trim(), value)?;
        }
        Ok(config)
    }

    /// Sanity checks that run before any file is written.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.num_prompts == 0
            || self.vocab_size == 0
            || self.response_len == 0
            || self.targets_per_prompt == 0
            || self.context_window == 0
        {
            return Err(HarnessError::Config("task dimensions must be >= 1".into()));
        }
        if self.group_size < 2 {
            return Err(HarnessError::Config("group_size must be >= 2".into()));
        }
        if self.eta <= 0.0 {
            return Err(HarnessError::Config("eta must be > 0".into()));
        }
        if self.inner_epochs == 0 {
            return Err(HarnessError::Config("inner_epochs must be >= 1".into()));
        }
        if !(self.eps > 0.0 && self.eps < 1.0 && self.eps_high > 0.0 && self.eps_high < 1.0) {
            return Err(HarnessError::Config("eps thresholds must lie in (0, 1)".into()));
        }
        if !(self.bucket_edge_low > 0.0 && self.bucket_edge_low < self.bucket_edge_high
            && self.bucket_edge_high < 1.0)
        {
            return Err(HarnessError::Config(
                "bucket edges must satisfy 0 < low < high < 1".into(),
            ));
        }
        if self.loss == LossKind::Npg && self.response_len != 1 {
            return Err(HarnessError::Config(
                "loss = npg requires the exact-expectation bandit setting (response_len = 1)"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_pass_validation() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn set_round_trips_every_key() {
        let mut cfg = RunConfig::default();
        cfg.set("loss", "kl_cov").unwrap();
        cfg.set("algorithm", "rloo").unwrap();
        cfg.set("eta", "12.5").unwrap();
        cfg.set("kl_penalty", "exact-kl").unwrap();
        cfg.set("entropy_mode", "mc").unwrap();
        cfg.set("rloo_rescale", "true").unwrap();
        assert_eq!(cfg.loss, LossKind::KlCov);
        assert_eq!(cfg.algorithm, Algorithm::Rloo);
        assert_eq!(cfg.eta, 12.5);
        assert_eq!(cfg.kl_penalty, KlPenaltyKind::ExactKl);
        assert_eq!(cfg.entropy_mode, EntropyMode::MonteCarlo);
        assert!(cfg.rloo_rescale);
    }

    #[test]
    fn unknown_key_and_bad_values_error() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("not_a_key", "1").is_err());
        assert!(cfg.set("eta", "abc").is_err());
        assert!(cfg.set("loss", "dpo").is_err());
    }

    #[test]
    fn npg_requires_bandit() {
        let mut cfg = RunConfig::default();
        cfg.set("loss", "npg").unwrap();
        assert!(cfg.validate().is_err());
        cfg.set("response_len", "1").unwrap();
        cfg.set("context_window", "1").unwrap();
        cfg.set("targets_per_prompt", "1").unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn config_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# comment\nsteps = 5\nloss = clip_cov\n\nseed=9\n",
        )
        .unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.steps, 5);
        assert_eq!(cfg.loss, LossKind::ClipCov);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn config_keys_list_is_exhaustive() {
        // Every listed key must be assignable.
        let mut cfg = RunConfig::default();
        for key in CONFIG_KEYS {
            let probe = match *key {
                "algorithm" => "grpo",
                "loss" => "ppo_clip",
                "kl_penalty" => "abs-logratio",
                "entropy_mode" => "exact",
                "rloo_rescale" => "false",
                _ => "1",
            };
            cfg.set(key, probe).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }
}
