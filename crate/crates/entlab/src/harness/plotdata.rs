//! Plot-ready TSV emission from finished run directories. No rendering —
//! just aligned series with a one-line `#` comment naming the source runs.

use std::path::{Path, PathBuf};

use super::io::{read_covariances_csv, read_steps_csv, LineWriter};
use super::HarnessError;
use crate::dynamics::{consumption_curve, cov_quantile_report, StepRecord, DEFAULT_QUANTILES};
use crate::fitlab::fit_exponential;

/// Which series a TSV should carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    EntropyCurve,
    FitCurve,
    CovCurve,
    Consumption,
    Quantiles,
}

impl PlotKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "entropy_curve" => Self::EntropyCurve,
            "fit_curve" => Self::FitCurve,
            "cov_curve" => Self::CovCurve,
            "consumption" => Self::Consumption,
            "quantiles" => Self::Quantiles,
            _ => return None,
        })
    }
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn fmt(v: f64) -> String {
    super::io::fmt_f64(v)
}

/// Column suffix: empty for a single run, `_<name>` when several are aligned.
fn suffix(names: &[String], i: usize) -> String {
    if names.len() == 1 {
        String::new()
    } else {
        format!("_{}", names[i])
    }
}

/// Emits one TSV for `kind` over the given run directories.
pub fn emit_plot_data(
    run_dirs: &[PathBuf],
    kind: PlotKind,
    out_path: &Path,
) -> Result<(), HarnessError> {
    if run_dirs.is_empty() {
        return Err(HarnessError::MissingInput("no run directories given".into()));
    }
    let names: Vec<String> = run_dirs.iter().map(|d| run_name(d)).collect();

    let mut out = LineWriter::create(
        out_path,
        &format!("# source: {}", names.join(",")),
    )?;

    match kind {
        PlotKind::Quantiles => {
            let mut tables = Vec::new();
            for dir in run_dirs {
                let path = dir.join("covariances.csv");
                if !path.exists() {
                    return Err(HarnessError::MissingInput(path.display().to_string()));
                }
                let covs = read_covariances_csv(&path)?;
                tables.push(cov_quantile_report(&covs, &DEFAULT_QUANTILES)?);
            }
            let mut header = String::from("quantile_pct");
            for (i, _) in tables.iter().enumerate() {
                header.push_str(&format!("\tmean{}", suffix(&names, i)));
            }
            out.write_line(&header)?;
            for row_idx in 0..DEFAULT_QUANTILES.len() {
                let mut line = fmt(DEFAULT_QUANTILES[row_idx]);
                for table in &tables {
                    line.push('\t');
                    line.push_str(&fmt(table[row_idx].mean));
                }
                out.write_line(&line)?;
            }
        }
        _ => {
            let mut runs: Vec<Vec<StepRecord>> = Vec::new();
            for dir in run_dirs {
                let path = dir.join("steps.csv");
                if !path.exists() {
                    return Err(HarnessError::MissingInput(path.display().to_string()));
                }
                runs.push(read_steps_csv(&path)?);
            }
            let len = runs[0].len();
            if runs.iter().any(|r| r.len() != len) {
                return Err(HarnessError::Malformed {
                    path: out_path.display().to_string(),
                    reason: "runs have different step counts; cannot align".into(),
                });
            }
            if len == 0 {
                return Err(HarnessError::MissingInput("runs contain no steps".into()));
            }
            emit_step_aligned(&mut out, kind, &runs, &names, len)?;
        }
    }
    out.finish()
}

fn emit_step_aligned(
    out: &mut LineWriter,
    kind: PlotKind,
    runs: &[Vec<StepRecord>],
    names: &[String],
    len: usize,
) -> Result<(), HarnessError> {
    match kind {
        PlotKind::EntropyCurve | PlotKind::CovCurve => {
            let field = if kind == PlotKind::EntropyCurve {
                "entropy"
            } else {
                "cov_mean"
            };
            let mut header = String::from("step");
            for (i, _) in runs.iter().enumerate() {
                header.push_str(&format!("\t{field}{}", suffix(names, i)));
            }
            out.write_line(&header)?;
            for t in 0..len {
                let mut line = runs[0][t].step.to_string();
                for run in runs {
                    let v = if kind == PlotKind::EntropyCurve {
                        run[t].entropy
                    } else {
                        run[t].cov_mean
                    };
                    line.push('\t');
                    line.push_str(&fmt(v));
                }
                out.write_line(&line)?;
            }
        }
        PlotKind::FitCurve => {
            let mut fits = Vec::new();
            for run in runs {
                let points: Vec<(f64, f64)> =
                    run.iter().map(|r| (r.entropy, r.val_reward)).collect();
                fits.push(fit_exponential(&points)?);
            }
            let mut header = String::from("step");
            for (i, _) in runs.iter().enumerate() {
                let s = suffix(names, i);
                header.push_str(&format!("\tentropy{s}\tr_true{s}\tr_fit{s}"));
            }
            out.write_line(&header)?;
            for t in 0..len {
                let mut line = runs[0][t].step.to_string();
                for (run, fit) in runs.iter().zip(&fits) {
                    let r = &run[t];
                    let pred = -fit.a * r.entropy.exp() + fit.b;
                    line.push_str(&format!(
                        "\t{}\t{}\t{}",
                        fmt(r.entropy),
                        fmt(r.val_reward),
                        fmt(pred)
                    ));
                }
                out.write_line(&line)?;
            }
        }
        PlotKind::Consumption => {
            let mut curves = Vec::new();
            for run in runs {
                curves.push(consumption_curve(run)?);
            }
            let mut header = String::from("step_frac");
            for (i, _) in runs.iter().enumerate() {
                let s = suffix(names, i);
                header.push_str(&format!("\tentropy_consumed{s}\tperf_gained{s}"));
            }
            out.write_line(&header)?;
            let denom = (len - 1).max(1) as f64;
            for t in 0..len {
                let mut line = fmt(t as f64 / denom);
                for curve in &curves {
                    line.push_str(&format!(
                        "\t{}\t{}",
                        fmt(curve.entropy_raw[t]),
                        fmt(curve.reward_raw[t])
                    ));
                }
                out.write_line(&line)?;
            }
        }
        PlotKind::Quantiles => unreachable!("handled by caller"),
    }
    Ok(())
}
