//! Report rows, asserted properties, and their CSV / JSON serialization.

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

/// One table cell: a metric of one method at one parameter point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub experiment: String,
    pub method: String,
    pub delta: Option<f64>,
    pub n: Option<usize>,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; empty when there is a single replication.
    pub std: Option<f64>,
    pub replications: usize,
}

impl ReportRow {
    /// Row summarizing `values` by mean and sample standard deviation.
    pub fn from_values(experiment: &str, method: &str, metric: &str, values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self {
            experiment: experiment.to_string(),
            method: method.to_string(),
            delta: None,
            n: None,
            metric: metric.to_string(),
            mean,
            std,
            replications: values.len(),
        }
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = Some(delta);
        self
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = Some(n);
        self
    }
}

/// Mean and sample standard deviation (`None` for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Some(var.sqrt()))
}

/// Standard error of the mean.
pub fn std_err(values: &[f64]) -> f64 {
    mean_std(values).1.map_or(f64::NAN, |s| s / (values.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Property {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub experiment: String,
    pub seed: u64,
    /// Resolved parameters, echoed into the summary.
    pub params: Value,
    pub rows: Vec<ReportRow>,
    pub properties: Vec<Property>,
}

impl Report {
    pub fn new(experiment: &str, seed: u64, params: Value) -> Self {
        Self { experiment: experiment.to_string(), seed, params, rows: Vec::new(), properties: Vec::new() }
    }

    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: String) {
        self.properties.push(Property { name: name.to_string(), passed, detail });
    }

    pub fn passed(&self) -> bool {
        self.properties.iter().all(|p| p.passed)
    }

    pub fn property(&self, name: &str) -> Option<&Property> {
        self.properties.iter().find(|p| p.name == name)
    }

    pub fn csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        if self.rows.is_empty() {
            w.write_record(["experiment", "method", "delta", "n", "metric", "mean", "std", "replications"])?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }

    pub fn summary(&self) -> Value {
        json!({
            "schema": SCHEMA_VERSION,
            "experiment": self.experiment,
            "seed": self.seed,
            "params": self.params,
            "rows": self.rows.len(),
            "properties": self.properties,
            "passed": self.passed(),
        })
    }

    /// Writes `<experiment>.csv` and `<experiment>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let csv_path = dir.join(format!("{}.csv", self.experiment));
        let json_path = dir.join(format!("{}.json", self.experiment));
        std::fs::write(&csv_path, self.csv_string()?)
            .with_context(|| format!("cannot write {}", csv_path.display()))?;
        let mut text = serde_json::to_string_pretty(&self.summary())?;
        text.push('\n');
        std::fs::write(&json_path, text).with_context(|| format!("cannot write {}", json_path.display()))?;
        Ok((csv_path, json_path))
    }
}
