//! Metrics files: per-step JSON lines and a per-run CSV summary.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::trainer::StepMetrics;

/// One row of the summary CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run_id: String,
    pub bits: String,
    pub mode: String,
    pub init: String,
    pub seed: u64,
    pub status: String,
    pub accuracy: f64,
    pub teacher_accuracy: f64,
    pub hidden: f64,
    pub att: f64,
    pub trm: f64,
    pub pre: f64,
    pub kd: f64,
    pub gt: f64,
    pub total: f64,
    pub size_bytes: f64,
    pub ratio: f64,
}

pub const SUMMARY_HEADER: [&str; 17] = [
    "run_id",
    "bits",
    "mode",
    "init",
    "seed",
    "status",
    "accuracy",
    "teacher_accuracy",
    "hidden",
    "att",
    "trm",
    "pre",
    "kd",
    "gt",
    "total",
    "size_bytes",
    "ratio",
];

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Writes one JSON object per step, replacing any existing file.
pub fn write_jsonl(path: &Path, steps: &[StepMetrics]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = BufWriter::new(File::create(path)?);
    for s in steps {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<StepMetrics>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Writes the summary with a header row even when `rows` is empty.
pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::LossBreakdown;

    fn step(i: usize) -> StepMetrics {
        let x = 1.0 / (i as f64 + 3.0);
        StepMetrics {
            step: i,
            epoch: 0,
            lr_weights: 1e-3 * x,
            lr_scale_w: 1e-3,
            lr_scale_a: 2e-2,
            loss: LossBreakdown {
                hidden: x,
                att: x * x,
                trm: x + x * x,
                pre: 0.1 + x,
                kd: 0.1 + 2.0 * x + x * x,
                gt: std::f64::consts::LN_2 * x,
                total: 0.7 / 3.0 + x,
            },
            eval_accuracy: (i % 2 == 0).then_some(0.5 + x),
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m/metrics.jsonl");
        let steps: Vec<_> = (0..7).map(step).collect();
        write_jsonl(&path, &steps).unwrap();
        let back = read_jsonl(&path).unwrap();
        for (a, b) in steps.iter().zip(&back) {
            let (x, y) = (a.loss, b.loss);
            for (u, v) in [
                (x.hidden, y.hidden),
                (x.att, y.att),
                (x.trm, y.trm),
                (x.pre, y.pre),
                (x.kd, y.kd),
                (x.gt, y.gt),
                (x.total, y.total),
            ] {
                assert!((u - v).abs() <= 1e-12);
            }
        }
        assert_eq!(back, steps);
    }

    #[test]
    fn empty_summary_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.csv");
        write_summary_csv(&path, &[]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.trim_end(), SUMMARY_HEADER.join(","));
        assert!(read_summary_csv(&path).unwrap().is_empty());
    }

    #[test]
    fn re_emit_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.csv");
        let row = SummaryRow {
            run_id: "a".into(),
            bits: "2-2-8".into(),
            mode: "kd+gt".into(),
            init: "truncation".into(),
            seed: 3,
            status: "ok".into(),
            accuracy: 0.1 + 0.2,
            teacher_accuracy: 1.0,
            hidden: 1e-17,
            att: 0.0,
            trm: 1e-17,
            pre: 0.3,
            kd: 0.3,
            gt: 0.2,
            total: 0.5,
            size_bytes: 123.0,
            ratio: 14.9,
        };
        write_summary_csv(&path, &[row.clone(), row.clone()]).unwrap();
        let first = fs::read(&path).unwrap();
        write_summary_csv(&path, &[row.clone(), row.clone()]).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
        assert_eq!(read_summary_csv(&path).unwrap(), vec![row.clone(), row]);
    }
}
