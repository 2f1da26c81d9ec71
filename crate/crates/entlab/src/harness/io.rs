//! CSV / JSON-lines persistence with a strict reader.
//!
//! Floats are written with Rust's shortest round-trip formatting so outputs
//! are byte-deterministic and parse back to identical values; `NaN` marks
//! empty aggregates (e.g. a difficulty bucket with no groups that step).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::HarnessError;
use crate::dynamics::{EntropyDeltaPrediction, StepRecord};
use crate::fitlab::FitResult;

pub const STEPS_HEADER: &str =
    "step,entropy,cov_mean,train_acc,val_reward,resp_len,cov_easy,cov_mid,cov_hard";
pub const DYNAMICS_HEADER: &str = "step,eta,pred_lemma1,pred_theorem,measured,abs_err";
pub const COVARIANCES_HEADER: &str = "covariance";
pub const PREDICTIONS_HEADER: &str = "step,entropy,R_true,R_pred";

/// Buffered line writer used for all run outputs.
pub struct LineWriter {
    path: String,
    out: BufWriter<File>,
}

impl LineWriter {
    pub fn create(path: &Path, header: &str) -> Result<Self, HarnessError> {
        let file =
            File::create(path).map_err(|e| HarnessError::io(path.display().to_string(), e))?;
        let mut w = Self {
            path: path.display().to_string(),
            out: BufWriter::new(file),
        };
        if !header.is_empty() {
            w.write_line(header)?;
        }
        Ok(w)
    }

    pub fn write_line(&mut self, line: &str) -> Result<(), HarnessError> {
        writeln!(self.out, "{line}").map_err(|e| HarnessError::io(self.path.clone(), e))
    }

    pub fn write_json<T: Serialize>(&mut self, value: &T) -> Result<(), HarnessError> {
        let line = serde_json::to_string(value)?;
        self.write_line(&line)
    }

    pub fn finish(mut self) -> Result<(), HarnessError> {
        self.out
            .flush()
            .map_err(|e| HarnessError::io(self.path.clone(), e))
    }
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn step_record_line(r: &StepRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.step,
        fmt_f64(r.entropy),
        fmt_f64(r.cov_mean),
        fmt_f64(r.train_acc),
        fmt_f64(r.val_reward),
        fmt_f64(r.resp_len),
        fmt_f64(r.cov_easy),
        fmt_f64(r.cov_mid),
        fmt_f64(r.cov_hard),
    )
}

pub fn dynamics_line(p: &EntropyDeltaPrediction) -> String {
    format!(
        "{},{},{},{},{},{}",
        p.step,
        fmt_f64(p.eta),
        fmt_f64(p.pred_lemma1),
        fmt_f64(p.pred_theorem),
        fmt_f64(p.measured),
        fmt_f64(p.abs_err),
    )
}

/// Reads a comma-separated file strictly: non-empty, a header row, and every
/// row with exactly the header's column count.
pub fn strict_read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| HarnessError::Malformed {
            path: path.display().to_string(),
            reason: "empty file".into(),
        })?;
    let header: Vec<String> = header_line.split(',').map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|s| s.to_string()).collect();
        if fields.len() != header.len() {
            return Err(HarnessError::Malformed {
                path: path.display().to_string(),
                reason: format!(
                    "row {} has {} fields, header has {}",
                    i + 2,
                    fields.len(),
                    header.len()
                ),
            });
        }
        rows.push(fields);
    }
    Ok((header, rows))
}

fn parse_f64(path: &Path, field: &str, v: &str) -> Result<f64, HarnessError> {
    v.parse().map_err(|_| HarnessError::Malformed {
        path: path.display().to_string(),
        reason: format!("bad {field} value {v:?}"),
    })
}

/// Strictly parses a `steps.csv`, checking the exact header.
pub fn read_steps_csv(path: &Path) -> Result<Vec<StepRecord>, HarnessError> {
    let (header, rows) = strict_read_csv(path)?;
    if header.join(",") != STEPS_HEADER {
        return Err(HarnessError::Malformed {
            path: path.display().to_string(),
            reason: format!("unexpected header {:?}", header.join(",")),
        });
    }
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        out.push(StepRecord {
            step: row[0].parse().map_err(|_| HarnessError::Malformed {
                path: path.display().to_string(),
                reason: format!("bad step value {:?}", row[0]),
            })?,
            entropy: parse_f64(path, "entropy", &row[1])?,
            cov_mean: parse_f64(path, "cov_mean", &row[2])?,
            train_acc: parse_f64(path, "train_acc", &row[3])?,
            val_reward: parse_f64(path, "val_reward", &row[4])?,
            resp_len: parse_f64(path, "resp_len", &row[5])?,
            cov_easy: parse_f64(path, "cov_easy", &row[6])?,
            cov_mid: parse_f64(path, "cov_mid", &row[7])?,
            cov_hard: parse_f64(path, "cov_hard", &row[8])?,
        });
    }
    Ok(out)
}

/// Reads a single-column `covariances.csv`.
pub fn read_covariances_csv(path: &Path) -> Result<Vec<f64>, HarnessError> {
    let (header, rows) = strict_read_csv(path)?;
    if header.len() != 1 || header[0] != COVARIANCES_HEADER {
        return Err(HarnessError::Malformed {
            path: path.display().to_string(),
            reason: format!("unexpected header {:?}", header.join(",")),
        });
    }
    rows.iter()
        .map(|row| parse_f64(path, "covariance", &row[0]))
        .collect()
}

/// Writes a `FitResult` as pretty JSON.
pub fn write_fit_json(path: &Path, fit: &FitResult) -> Result<(), HarnessError> {
    let json = serde_json::to_string_pretty(fit)?;
    std::fs::write(path, json + "\n")
        .map_err(|e| HarnessError::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting_round_trips() {
        for v in [1.0 / 3.0, 1e-300, -0.0, 2.5e17, f64::NAN] {
            let s = fmt_f64(v);
            let back: f64 = s.parse().unwrap();
            if v.is_nan() {
                assert!(back.is_nan());
            } else {
                assert_eq!(v.to_bits(), back.to_bits(), "{s}");
            }
        }
    }

    #[test]
    fn strict_reader_rejects_ragged_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,b\n1,2\n3\n").unwrap();
        assert!(matches!(
            strict_read_csv(&path),
            Err(HarnessError::Malformed { .. })
        ));
    }

    #[test]
    fn steps_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("steps.csv");
        let rec = StepRecord {
            step: 3,
            entropy: 1.0 / 3.0,
            cov_mean: 0.125,
            train_acc: 0.5,
            val_reward: 0.75,
            resp_len: 4.0,
            cov_easy: f64::NAN,
            cov_mid: 0.1,
            cov_hard: -0.2,
        };
        let mut w = LineWriter::create(&path, STEPS_HEADER).unwrap();
        w.write_line(&step_record_line(&rec)).unwrap();
        w.finish().unwrap();
        let back = read_steps_csv(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].entropy.to_bits(), rec.entropy.to_bits());
        assert!(back[0].cov_easy.is_nan());
        assert_eq!(back[0].step, 3);
    }

    #[test]
    fn steps_csv_header_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("steps.csv");
        std::fs::write(&path, "step,entropy\n1,0.5\n").unwrap();
        assert!(read_steps_csv(&path).is_err());
    }
}
