//! Run records: metric rows, environment, summary.
//!
//! Files written into the output directory, each atomically:
//!
//! * `metrics.csv`: header `epoch,split,metric,value,seconds`, one row per
//!   measurement. `seconds` is wall time since the run started and is the
//!   only column allowed to differ between reruns with the same seed.
//! * `metrics.jsonl`: the same rows, one JSON object per line.
//! * `summary.json`: `{"command", "environment", "summary"}`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use lcm_core::mpm::write_atomic;
use lcm_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const CSV_HEADER: &str = "epoch,split,metric,value,seconds";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub precision: String,
    pub workers: usize,
    pub seed: u64,
    pub version: String,
}

#[derive(Debug)]
pub struct RunRecord {
    pub command: String,
    pub environment: Environment,
    pub rows: Vec<MetricRow>,
    pub summary: BTreeMap<String, Value>,
    start: Instant,
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Format(format!("json: {e}"))
}

impl RunRecord {
    pub fn new(command: &str, precision: &str, workers: usize, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            environment: Environment {
                precision: precision.to_string(),
                workers,
                seed,
                version: env!("CARGO_PKG_VERSION").to_string(),
            },
            rows: Vec::new(),
            summary: BTreeMap::new(),
            start: Instant::now(),
        }
    }

    pub fn push(&mut self, epoch: usize, split: &str, metric: &str, value: f64) {
        let seconds = self.start.elapsed().as_secs_f64();
        log::debug!("{epoch} {split} {metric} = {value}");
        self.rows.push(MetricRow {
            epoch,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
            seconds,
        });
    }

    pub fn summarize(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.summary.insert(key.to_string(), v);
    }

    pub fn csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{:.3}", r.epoch, r.split, r.metric, r.value, r.seconds);
        }
        s
    }

    pub fn jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.rows {
            s += &serde_json::to_string(r).map_err(json_err)?;
            s.push('\n');
        }
        Ok(s)
    }

    pub fn summary_json(&self) -> Result<String> {
        let doc = serde_json::json!({
            "command": self.command,
            "environment": self.environment,
            "summary": self.summary,
        });
        serde_json::to_string_pretty(&doc).map_err(json_err).map(|s| s + "\n")
    }

    /// Writes the three record files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("metrics.csv"), self.csv().as_bytes())?;
        write_atomic(&dir.join("metrics.jsonl"), self.jsonl()?.as_bytes())?;
        write_atomic(&dir.join("summary.json"), self.summary_json()?.as_bytes())
    }
}

/// Parses `metrics.jsonl` text back into rows.
pub fn parse_jsonl(text: &str) -> Result<Vec<MetricRow>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(json_err))
        .collect()
}

/// `metrics.csv` text with the `seconds` column removed, for rerun comparison.
pub fn csv_without_seconds(text: &str) -> String {
    text.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> RunRecord {
        let mut r = RunRecord::new("pretrain", "f32", 2, 7);
        r.push(0, "val", "chamfer", 0.125);
        r.push(1, "train", "chamfer", 1.0 / 3.0);
        r.summarize("ratio", 0.5);
        r
    }

    #[test]
    fn csv_header_is_fixed() {
        let csv = record().csv();
        assert_eq!(csv.lines().next(), Some("epoch,split,metric,value,seconds"));
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,val,chamfer,0.125,"));
    }

    #[test]
    fn jsonl_round_trips() {
        let r = record();
        assert_eq!(parse_jsonl(&r.jsonl().unwrap()).unwrap(), r.rows);
    }

    #[test]
    fn summary_carries_environment() {
        let v: Value = serde_json::from_str(&record().summary_json().unwrap()).unwrap();
        assert_eq!(v["environment"]["precision"], "f32");
        assert_eq!(v["environment"]["workers"], 2);
        assert_eq!(v["summary"]["ratio"], 0.5);
    }

    #[test]
    fn seconds_column_is_dropped_for_comparison() {
        let a = "epoch,split,metric,value,seconds\n0,val,x,1,0.100";
        let b = "epoch,split,metric,value,seconds\n0,val,x,1,9.999";
        assert_eq!(csv_without_seconds(a), csv_without_seconds(b));
    }
}
