//! Sequence accuracy with its two error classes, Levenshtein distance, and
//! the misclassification-by-length table.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit-cost edit distance over code points.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub ground_truth: String,
    pub predicted: String,
    pub sample_id: String,
}

impl PredictionRecord {
    pub fn new(ground_truth: impl Into<String>, predicted: impl Into<String>, sample_id: impl Into<String>) -> Self {
        PredictionRecord {
            ground_truth: ground_truth.into(),
            predicted: predicted.into(),
            sample_id: sample_id.into(),
        }
    }
}

/// `Tp` is an exact match; `Tn1` a wrong prediction of a different length;
/// `Tn2` a wrong prediction of the same length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Tp,
    Tn1,
    Tn2,
}

pub fn classify_prediction(record: &PredictionRecord) -> Outcome {
    if record.ground_truth == record.predicted {
        Outcome::Tp
    } else if record.ground_truth.chars().count() != record.predicted.chars().count() {
        Outcome::Tn1
    } else {
        Outcome::Tn2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_levenshtein: f64,
    pub tp: usize,
    pub tn1: usize,
    pub tn2: usize,
    pub n: usize,
}

/// `accuracy = tp / (tp + tn1 + tn2)`; the Levenshtein mean runs over every
/// record, so exact matches pull it towards zero.
pub fn evaluate(records: &[PredictionRecord]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Parameter("cannot evaluate an empty record set".into()));
    }
    let (mut tp, mut tn1, mut tn2, mut edits) = (0, 0, 0, 0usize);
    for r in records {
        match classify_prediction(r) {
            Outcome::Tp => tp += 1,
            Outcome::Tn1 => tn1 += 1,
            Outcome::Tn2 => tn2 += 1,
        }
        edits += levenshtein(&r.ground_truth, &r.predicted);
    }
    let n = records.len();
    Ok(EvalReport {
        accuracy: tp as f64 / n as f64,
        mean_levenshtein: edits as f64 / n as f64,
        tp,
        tn1,
        tn2,
        n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthSplit {
    pub same_length_errors: usize,
    pub different_length_errors: usize,
    pub total_errors: usize,
}

pub fn length_split_table(records: &[PredictionRecord]) -> LengthSplit {
    let mut split = LengthSplit {
        same_length_errors: 0,
        different_length_errors: 0,
        total_errors: 0,
    };
    for r in records {
        match classify_prediction(r) {
            Outcome::Tp => continue,
            Outcome::Tn1 => split.different_length_errors += 1,
            Outcome::Tn2 => split.same_length_errors += 1,
        }
        split.total_errors += 1;
    }
    split
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// One header row and one value row, EvalReport field order.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.serialize(self)?;
        w.flush()?;
        Ok(())
    }
}

impl LengthSplit {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.serialize(self)?;
        w.flush()?;
        Ok(())
    }
}

/// `ground_truth,predicted,sample_id` rows.
pub fn write_records(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<PredictionRecord>> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Human-readable summary used by the CLI.
pub fn write_summary(mut w: impl Write, label: &str, report: &EvalReport, split: &LengthSplit) -> Result<()> {
    writeln!(
        w,
        "{label}: accuracy {:.3} ({} / {}), mean Levenshtein {:.3}, errors {} (same length {}, different length {})",
        report.accuracy,
        report.tp,
        report.n,
        report.mean_levenshtein,
        split.total_errors,
        split.same_length_errors,
        split.different_length_errors
    )?;
    Ok(())
}
