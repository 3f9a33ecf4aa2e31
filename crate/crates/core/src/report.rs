//! Append-only CSV run records.

use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One row of a run log. Empty cells stand for fields that do not apply to
/// the command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config_hash: String,
    pub representation: String,
    pub rank: usize,
    pub compression_rate: f64,
    pub distill: String,
    pub lambda: f64,
    pub epoch: Option<usize>,
    pub split: String,
    pub perplexity: Option<f64>,
    pub mean_seconds: Option<f64>,
    pub sd_seconds: Option<f64>,
    pub measurements: Option<usize>,
    pub status: String,
    pub timestamp: u64,
}

impl RunRecord {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            config_hash: String::new(),
            representation: String::new(),
            rank: 0,
            compression_rate: 1.0,
            distill: "none".into(),
            lambda: 0.0,
            epoch: None,
            split: String::new(),
            perplexity: None,
            mean_seconds: None,
            sd_seconds: None,
            measurements: None,
            status: "ok".into(),
            timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }
}

/// Header line followed by `records`.
pub fn to_csv(records: &[RunRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record(header())?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn header() -> Vec<&'static str> {
    vec![
        "command",
        "config_hash",
        "representation",
        "rank",
        "compression_rate",
        "distill",
        "lambda",
        "epoch",
        "split",
        "perplexity",
        "mean_seconds",
        "sd_seconds",
        "measurements",
        "status",
        "timestamp",
    ]
}

/// Appends `records` to `path`, writing the header only when the file is new
/// or empty.
pub fn append_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(header())?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(k: usize) -> RunRecord {
        RunRecord {
            epoch: Some(k),
            perplexity: Some(123.456 + k as f64),
            split: "valid".into(),
            timestamp: 1_700_000_000,
            ..RunRecord::new("train")
        }
    }

    #[test]
    fn header_written_once_and_rows_reparse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.csv");
        append_records(&path, &[sample(1)]).unwrap();
        append_records(&path, &[sample(2), sample(3)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches("command,config_hash").count(), 1);
        let back = read_records(&path).unwrap();
        assert_eq!(back, vec![sample(1), sample(2), sample(3)]);
    }

    #[test]
    fn header_matches_serialized_fields() {
        let text = to_csv(&[sample(1)]).unwrap();
        assert_eq!(text.lines().next().unwrap(), header().join(","));
        assert_eq!(to_csv(&[]).unwrap().trim_end(), header().join(","));
    }

    #[test]
    fn numbers_use_dot_decimals() {
        let text = to_csv(&[sample(0)]).unwrap();
        assert!(text.contains("123.456"));
    }
}
