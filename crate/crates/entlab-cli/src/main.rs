//! `entlab` — experiment harness CLI.
//!
//! Subcommands: `run`, `verify-dynamics`, `fit`, `predict`, `plot-data`,
//! `cov-report`. Exit codes: 0 success, 1 invariant failure, 2 usage error.
//! `ENTLAB_OUT_ROOT` sets the default root for run output directories.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use entlab::dynamics::{cov_quantile_report, DEFAULT_QUANTILES};
use entlab::harness::{
    emit_plot_data, fit_and_predict, read_covariances_csv, run_experiment, verify_dynamics,
    PlotKind, RunConfig,
};

#[derive(Parser)]
#[command(name = "entlab", version, about = "Entropy-dynamics experiments on tabular softmax policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file; defaults apply for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Repeatable key=value override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for assignment in &self.set {
            let (key, value) = assignment.split_once('=').ok_or_else(|| {
                anyhow::anyhow!("--set expects key=value, got {assignment:?}")
            })?;
            config.set(key.trim(), value)?;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Execute a training run and write its outputs.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (default: <out-root>/<loss>-<algorithm>-seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the randomized first-order dynamics suites; exit 1 on failure.
    VerifyDynamics {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negative control: double the applied logit delta so the exact
        /// identity check must fail.
        #[arg(long, default_value_t = false)]
        inject_fault: bool,
    },
    /// Fit the entropy/performance law on a finished run.
    Fit {
        /// Run directory containing steps.csv.
        #[arg(long)]
        run: PathBuf,
        /// Fraction of leading steps to fit on.
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
    },
    /// Fit on the leading fraction and predict the remainder.
    Predict {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 0.15)]
        fraction: f64,
    },
    /// Emit plot-ready TSV data from one or more runs.
    PlotData {
        /// entropy_curve | fit_curve | cov_curve | consumption | quantiles
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
        /// Run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Print the covariance quantile table of a run.
    CovReport {
        #[arg(long)]
        run: PathBuf,
    },
}

fn out_root() -> PathBuf {
    std::env::var_os("ENTLAB_OUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn loss_name(config: &RunConfig) -> &'static str {
    use entlab::harness::LossKind::*;
    match config.loss {
        Pg => "pg",
        Npg => "npg",
        PpoClip => "ppo_clip",
        ClipHigher => "clip_higher",
        EntropyReg => "entropy_reg",
        RefKl => "ref_kl",
        ClipCov => "clip_cov",
        KlCov => "kl_cov",
    }
}

fn algorithm_name(config: &RunConfig) -> &'static str {
    use entlab::harness::Algorithm::*;
    match config.algorithm {
        Grpo => "grpo",
        Rloo => "rloo",
        Reinforce => "reinforce",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config, out } => {
            let config = config.resolve()?;
            let out_dir = out.unwrap_or_else(|| {
                out_root().join(format!(
                    "{}-{}-seed{}",
                    loss_name(&config),
                    algorithm_name(&config),
                    config.seed
                ))
            });
            let output = run_experiment(&config, &out_dir)?;
            let last = output.steps.last();
            println!(
                "run complete: {} steps -> {}",
                output.steps.len(),
                out_dir.display()
            );
            if let Some(r) = last {
                println!(
                    "final entropy {:.6}, val reward {:.4}, train acc {:.4}",
                    r.entropy, r.val_reward, r.train_acc
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::VerifyDynamics { seed, inject_fault } => {
            let report = verify_dynamics(seed, inject_fault)?;
            print!("{}", report.render());
            if report.passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(1))
            }
        }
        Command::Fit { run, fraction } => {
            let result = fit_and_predict(&run, fraction)?;
            println!(
                "fit over {} points: a = {:.6}, b = {:.6}, rmse = {:.6}, ceiling = {:.6}",
                result.n_fit, result.fit.a, result.fit.b, result.fit.rmse, result.fit.ceiling
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Predict { run, fraction } => {
            let result = fit_and_predict(&run, fraction)?;
            println!(
                "fit on first {} steps; predicted {} steps with rmse = {:.6}",
                result.n_fit, result.n_predicted, result.heldout_rmse
            );
            println!(
                "a = {:.6}, b = {:.6}, ceiling = {:.6}",
                result.fit.a, result.fit.b, result.fit.ceiling
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::PlotData { kind, out, runs } => {
            let kind = PlotKind::parse(&kind)
                .ok_or_else(|| anyhow::anyhow!("unknown plot kind {kind:?}"))?;
            emit_plot_data(&runs, kind, &out)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::CovReport { run } => {
            let covs = read_covariances_csv(&run.join("covariances.csv"))?;
            let rows = cov_quantile_report(&covs, &DEFAULT_QUANTILES)?;
            println!("{:<12} {:>8} {:>14}", "group", "count", "mean");
            for row in rows {
                let label = if row.quantile_pct >= 100.0 {
                    "all".to_string()
                } else {
                    format!("top {}%", row.quantile_pct)
                };
                println!("{label:<12} {:>8} {:>14.6}", row.count, row.mean);
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
