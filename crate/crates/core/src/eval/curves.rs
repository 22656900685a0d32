//! Training-curve CSV: `phase,iteration,loss,accuracy,kind` with kind
//! `train` or `val`. Floats use Rust's shortest round-trip formatting, so
//! parsing an export gives back the identical log.

use std::fs;
use std::path::Path;

use super::EvalError;
use crate::train::{IterationRecord, Phase, TrainLog, ValidationRecord};

pub const CURVES_HEADER: &str = "phase,iteration,loss,accuracy,kind";

/// Rows in training order; a validation row follows the training row of
/// the same iteration.
pub fn curves_to_csv(log: &TrainLog) -> Result<String, EvalError> {
    if log.iterations.is_empty() && log.validations.is_empty() {
        return Err(EvalError::EmptyLog);
    }
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    let mut vals = log.validations.iter().peekable();
    let row = |out: &mut String, phase: Phase, it: usize, loss: f64, acc: f64, kind: &str| {
        out.push_str(&format!("{phase},{it},{loss},{acc},{kind}\n"));
    };
    for r in &log.iterations {
        row(&mut out, r.phase, r.iteration, r.loss, r.accuracy, "train");
        while let Some(v) = vals.next_if(|v| v.phase == r.phase && v.iteration == r.iteration) {
            row(&mut out, v.phase, v.iteration, v.loss, v.accuracy, "val");
        }
    }
    for v in vals {
        row(&mut out, v.phase, v.iteration, v.loss, v.accuracy, "val");
    }
    Ok(out)
}

pub fn export_curves(log: &TrainLog, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let csv = curves_to_csv(log)?;
    fs::write(path, csv)?;
    Ok(())
}

pub fn parse_curves(text: &str) -> Result<TrainLog, EvalError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == CURVES_HEADER => {}
        _ => {
            return Err(EvalError::Csv {
                line: 1,
                reason: format!("expected header {CURVES_HEADER:?}"),
            })
        }
    }
    let mut log = TrainLog::default();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| EvalError::Csv { line: i + 1, reason };
        let fields: Vec<&str> = line.split(',').collect();
        let [phase, iteration, loss, accuracy, kind] = fields[..] else {
            return Err(bad(format!("expected 5 fields, got {}", fields.len())));
        };
        let phase: Phase = phase.parse().map_err(bad)?;
        let iteration: usize = iteration.parse().map_err(|e| bad(format!("iteration: {e}")))?;
        let loss: f64 = loss.parse().map_err(|e| bad(format!("loss: {e}")))?;
        let accuracy: f64 = accuracy.parse().map_err(|e| bad(format!("accuracy: {e}")))?;
        match kind {
            "train" => log.iterations.push(IterationRecord {
                phase,
                iteration,
                loss,
                accuracy,
            }),
            "val" => log.validations.push(ValidationRecord {
                phase,
                iteration,
                loss,
                accuracy,
            }),
            other => return Err(bad(format!("unknown kind {other:?}"))),
        }
    }
    Ok(log)
}

pub fn read_curves(path: impl AsRef<Path>) -> Result<TrainLog, EvalError> {
    parse_curves(&fs::read_to_string(path)?)
}
