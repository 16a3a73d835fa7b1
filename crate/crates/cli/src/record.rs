//! Per-seed result records and the deterministic experiment summary.

use std::collections::BTreeMap;

use cmn_core::metrics::{MetricSummary, Required};
use cmn_core::trainer::FreezeCheck;
use cmn_core::{AccuracyMatrix, BaselineAccuracies, Dtype, ParamReport, TrainLog};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Recomputed metrics must match stored ones this closely.
pub const METRIC_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationTime {
    pub numerator: u64,
    pub denominator: u64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub schema_version: u32,
    pub config_digest: String,
    pub method: String,
    pub seed: u64,
    pub dtype: Dtype,
    pub tasks: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<AccuracyMatrix>,
    #[serde(default)]
    pub baselines: BaselineAccuracies,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricSummary>,
    /// Accuracy on each task right after learning it (or the reference
    /// learner's own per-task score).
    pub per_task: Vec<f64>,
    pub final_acc: f64,
    /// Target-task accuracy after each epoch, for transfer ablations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curve: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ParamReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration_time: Option<IterationTime>,
    pub wall_time_secs: f64,
    pub log: TrainLog,
    #[serde(default)]
    pub freeze_checks: Vec<FreezeCheck>,
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= METRIC_TOLERANCE
}

fn same(name: &str, stored: Option<f64>, fresh: Option<f64>) -> Result<()> {
    match (stored, fresh) {
        (Some(a), Some(b)) if close(a, b) => Ok(()),
        (None, None) => Ok(()),
        (a, b) => Err(CliError::Inconsistent(format!("{name}: stored {a:?}, recomputed {b:?}"))),
    }
}

/// Compares stored metrics with metrics recomputed from the matrix.
pub fn check_metrics(stored: &MetricSummary, fresh: &MetricSummary) -> Result<()> {
    same("acc", Some(stored.acc), Some(fresh.acc))?;
    same("bwt", stored.bwt, fresh.bwt)?;
    same("fwt", stored.fwt, fresh.fwt)?;
    same("af", stored.af, fresh.af)
}

impl ResultRecord {
    /// Recomputes every derived value and checks the freeze invariants.
    pub fn verify(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Inconsistent(format!(
                "record schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        match (&self.matrix, &self.metrics) {
            (Some(r), Some(stored)) => {
                let fresh = MetricSummary::compute(r, &self.baselines, Required::default())?;
                check_metrics(stored, &fresh)?;
                if !close(self.final_acc, fresh.acc) {
                    return Err(CliError::Inconsistent(format!(
                        "final_acc {} differs from the matrix average {}",
                        self.final_acc, fresh.acc
                    )));
                }
            }
            (None, None) => {}
            _ => return Err(CliError::Inconsistent("matrix and metrics must be stored together".into())),
        }
        if let Some(it) = &self.iteration_time {
            if it.denominator == 0 || !close(it.value, it.numerator as f64 / it.denominator as f64) {
                return Err(CliError::Inconsistent(format!("iteration time {it:?} is not a valid ratio")));
            }
        }
        if let Some(bad) = self.freeze_checks.iter().find(|c| !c.held()) {
            return Err(CliError::Inconsistent(format!(
                "{} network changed during the {} phase of task {}",
                bad.network,
                bad.phase.name(),
                bad.task
            )));
        }
        Ok(())
    }
}

/// Mean and sample standard deviation of one metric across seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Aggregate { mean, std, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub final_acc: f64,
    pub per_task: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricSummary>,
    /// Anterograde forgetting in percentage points.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub af_pct: Option<f64>,
}

/// Everything a run reports that does not depend on timing or location.
/// Two runs of the same config produce byte-identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub schema_version: u32,
    pub config_digest: String,
    pub method: String,
    pub tasks: usize,
    pub seeds: Vec<SeedMetrics>,
    pub summary: BTreeMap<String, Aggregate>,
}

impl MetricsFile {
    pub fn from_records(records: &[ResultRecord]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| CliError::Inconsistent("no seed records".into()))?;
        let seeds: Vec<SeedMetrics> = records
            .iter()
            .map(|r| SeedMetrics {
                seed: r.seed,
                final_acc: r.final_acc,
                per_task: r.per_task.clone(),
                metrics: r.metrics.clone(),
                af_pct: r.metrics.as_ref().and_then(|m| m.af).map(|a| 100.0 * a),
            })
            .collect();
        let mut summary = BTreeMap::new();
        let columns: [(&str, fn(&SeedMetrics) -> Option<f64>); 5] = [
            ("final_acc", |s| Some(s.final_acc)),
            ("acc", |s| s.metrics.as_ref().map(|m| m.acc)),
            ("bwt", |s| s.metrics.as_ref().and_then(|m| m.bwt)),
            ("fwt", |s| s.metrics.as_ref().and_then(|m| m.fwt)),
            ("af", |s| s.metrics.as_ref().and_then(|m| m.af)),
        ];
        for (name, get) in columns {
            let values: Vec<f64> = seeds.iter().filter_map(get).collect();
            if values.len() == seeds.len() {
                if let Some(a) = Aggregate::of(&values) {
                    summary.insert(name.to_string(), a);
                }
            }
        }
        Ok(MetricsFile {
            schema_version: SCHEMA_VERSION,
            config_digest: first.config_digest.clone(),
            method: first.method.clone(),
            tasks: first.tasks,
            seeds,
            summary,
        })
    }
}
