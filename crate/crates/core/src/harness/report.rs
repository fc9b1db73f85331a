use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{Bounds, ExperimentConfig, ExperimentKind};
use crate::error::Result;
use crate::stats::LinearFit;

/// One row of the per-epsilon metric table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epsilon: f64,
    pub metric: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    /// `None` when the quantity could not be computed, which fails the check.
    pub value: Option<f64>,
    pub bounds: Bounds,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub t: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub cumulative: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub seed: u64,
    pub rng: String,
    pub version: String,
}

/// Wall-clock data; everything outside this block is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
    pub per_epsilon_seconds: Vec<f64>,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub config: ExperimentConfig,
    pub metrics: Vec<MetricRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope: Option<LinearFit>,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub series: Option<Series>,
    pub environment: Environment,
    pub timings: Timings,
}

/// Collects metrics and check values while an experiment runs.
#[derive(Debug, Default)]
pub struct ReportBuilder {
    pub metrics: Vec<MetricRow>,
    pub observed: BTreeMap<String, f64>,
    pub notes: Vec<String>,
    pub slope: Option<LinearFit>,
    pub series: Option<Series>,
    pub label: Option<String>,
    pub per_epsilon_seconds: Vec<f64>,
}

impl ReportBuilder {
    pub fn metric(&mut self, epsilon: f64, metric: &str, value: f64, stderr: Option<f64>) {
        self.metrics.push(MetricRow {
            epsilon,
            metric: metric.into(),
            value,
            stderr,
        });
    }

    pub fn observe(&mut self, name: impl Into<String>, value: f64) {
        self.observed.insert(name.into(), value);
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    /// Judges the observed quantities against `defaults`, or against the
    /// config's own thresholds when it carries any.
    pub fn finish(
        self,
        config: &ExperimentConfig,
        defaults: BTreeMap<String, Bounds>,
        rng: &str,
        total_seconds: f64,
    ) -> ExperimentReport {
        let thresholds = config.thresholds.clone().unwrap_or(defaults);
        let checks: Vec<CheckResult> = thresholds
            .into_iter()
            .map(|(name, bounds)| {
                let value = self.observed.get(&name).copied().filter(|v| !v.is_nan());
                CheckResult {
                    passed: value.is_some_and(|v| bounds.admits(v)),
                    name,
                    value,
                    bounds,
                }
            })
            .collect();
        ExperimentReport {
            kind: config.kind,
            label: self.label,
            config: config.clone(),
            metrics: self.metrics,
            slope: self.slope,
            passed: checks.iter().all(|c| c.passed),
            checks,
            notes: self.notes,
            series: self.series,
            environment: Environment {
                seed: config.seed,
                rng: rng.into(),
                version: env!("CARGO_PKG_VERSION").into(),
            },
            timings: Timings {
                total_seconds,
                per_epsilon_seconds: self.per_epsilon_seconds,
                threads: rayon::current_num_threads(),
            },
        }
    }
}

impl ExperimentReport {
    /// JSON with the timing block removed, for reproducibility comparisons.
    pub fn reproducible_json(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(map) = value.as_object_mut() {
            map.remove("timings");
        }
        Ok(serde_json::to_string_pretty(&value)?)
    }

    pub fn write_metrics_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epsilon,metric,value,stderr")?;
        for row in &self.metrics {
            let se = row.stderr.map(|s| s.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{}", row.epsilon, row.metric, row.value, se)?;
        }
        Ok(())
    }

    pub fn write_series_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,sigma2,cumulative")?;
        if let Some(s) = &self.series {
            for ((t, v), c) in s.t.iter().zip(&s.sigma2).zip(&s.cumulative) {
                writeln!(out, "{t},{v},{c}")?;
            }
        }
        Ok(())
    }

    /// Writes `report.json` or `metrics.csv` (plus `series.csv` when present)
    /// into `dir`, returning the written paths.
    pub fn write(&self, dir: &Path, csv: bool) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        if csv {
            let path = dir.join("metrics.csv");
            self.write_metrics_csv(std::fs::File::create(&path)?)?;
            written.push(path);
            if self.series.is_some() {
                let path = dir.join("series.csv");
                self.write_series_csv(std::fs::File::create(&path)?)?;
                written.push(path);
            }
        } else {
            let path = dir.join("report.json");
            std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
            written.push(path);
        }
        Ok(written)
    }

    /// One line per check.
    pub fn summary_lines(&self) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| {
                let bound = match (c.bounds.lower, c.bounds.upper) {
                    (Some(l), Some(u)) => format!("in [{l}, {u}]"),
                    (Some(l), None) => format!(">= {l}"),
                    (None, Some(u)) => format!("<= {u}"),
                    (None, None) => "unbounded".into(),
                };
                let value = c.value.map(|v| format!("{v:.6e}")).unwrap_or_else(|| "n/a".into());
                format!("{} {}: {} (want {})", if c.passed { "PASS" } else { "FAIL" }, c.name, value, bound)
            })
            .collect()
    }
}
