//! Training metrics as JSON lines, one object per row, flushed as written
//! so a crashed run still leaves a readable log.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: u64,
    pub split: String,
    pub loss: f64,
    pub lr: f64,
    pub throughput_img_s: f64,
    pub wall_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(MetricsWriter { out: BufWriter::new(File::create(path)?) })
    }

    /// Append to an existing log (resumed runs).
    pub fn append(path: &Path) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(MetricsWriter { out: BufWriter::new(file) })
    }

    pub fn write(&mut self, row: &MetricRow) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, row)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

pub fn read_metrics(path: &Path) -> std::io::Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line)?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip_and_acc_is_omitted_when_absent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let rows = vec![
            MetricRow {
                step: 1,
                epoch: 0,
                split: "train".into(),
                loss: 0.5,
                lr: 1e-3,
                throughput_img_s: 100.0,
                wall_ms: 10.0,
                acc: None,
            },
            MetricRow {
                step: 2,
                epoch: 0,
                split: "val".into(),
                loss: 0.4,
                lr: 1e-3,
                throughput_img_s: 0.0,
                wall_ms: 5.0,
                acc: Some(0.75),
            },
        ];
        let mut w = MetricsWriter::create(&path).unwrap();
        for r in &rows {
            w.write(r).unwrap();
        }
        drop(w);
        assert_eq!(read_metrics(&path).unwrap(), rows);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.lines().next().unwrap().contains("acc"));
        assert!(text.lines().nth(1).unwrap().contains("\"acc\":0.75"));
    }
}
