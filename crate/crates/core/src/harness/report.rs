//! JSON run reports and their cross-seed aggregate.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::train::{Stage2Report, TrainReport};

/// Analytic accuracy ceilings for a binary primary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ceilings {
    /// Primary evidence alone over the clip.
    pub primary_only: f64,
    /// Primary plus every binary auxiliary.
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub arm: String,
    pub seed: u64,
    pub config_hash: String,
    /// Test-split metrics of the primary task.
    pub metrics: Vec<MetricReport>,
    pub ceilings: Option<Ceilings>,
    pub stage1: Vec<TrainReport>,
    pub stage2: Stage2Report,
    pub frozen_checksums_verified: bool,
    pub wall_clock_s: f64,
}

impl RunReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.metric == name).map(|m| m.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub stddev: f64,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl MetricSummary {
    pub fn from_values(values: Vec<f64>, seeds: Vec<u64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stddev = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            stddev,
            values,
            seeds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub config_hash: String,
    /// arm → metric → summary
    pub arms: BTreeMap<String, BTreeMap<String, MetricSummary>>,
}

pub fn aggregate(reports: &[RunReport], config_hash: &str) -> Result<Aggregate> {
    let mut arms: BTreeMap<String, BTreeMap<String, (Vec<f64>, Vec<u64>)>> = BTreeMap::new();
    let mut sorted: Vec<&RunReport> = reports.iter().collect();
    sorted.sort_by(|a, b| (&a.arm, a.seed).cmp(&(&b.arm, b.seed)));
    for r in sorted {
        let arm = arms.entry(r.arm.clone()).or_default();
        for m in &r.metrics {
            let e = arm.entry(m.metric.clone()).or_default();
            e.0.push(m.value);
            e.1.push(r.seed);
        }
    }
    for (arm, metrics) in &arms {
        let counts: Vec<usize> = metrics.values().map(|v| v.0.len()).collect();
        if counts.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Contract(format!("arm '{arm}' has a metric missing for some seed")));
        }
    }
    Ok(Aggregate {
        config_hash: config_hash.to_string(),
        arms: arms
            .into_iter()
            .map(|(arm, ms)| {
                let ms = ms
                    .into_iter()
                    .map(|(k, (v, s))| (k, MetricSummary::from_values(v, s)))
                    .collect();
                (arm, ms)
            })
            .collect(),
    })
}

pub fn report_file_name(arm: &str, seed: u64) -> String {
    format!("{arm}-seed{seed}.json")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Removes every `wall_clock_s` field, recursively, for determinism checks.
pub fn strip_wall_clock(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.remove("wall_clock_s");
            map.values_mut().for_each(strip_wall_clock);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_wall_clock),
        _ => {}
    }
}
