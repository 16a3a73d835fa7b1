//! Training curves and a human-readable summary table from stored records.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cmn_core::TrainPhase;

use crate::error::{CliError, Result};
use crate::io::{read_json, write_atomic};
use crate::record::{Aggregate, ResultRecord};

/// Every `seed-*/record.json` below `dir`, ordered by seed.
pub fn load_records(dir: &Path) -> Result<Vec<ResultRecord>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let name = entry.file_name();
        if name.to_string_lossy().starts_with("seed-") {
            let p = entry.path().join("record.json");
            if p.is_file() {
                paths.push(p);
            }
        }
    }
    let mut records = paths.iter().map(|p| read_json::<ResultRecord>(p)).collect::<Result<Vec<_>>>()?;
    records.sort_by_key(|r| (r.method.clone(), r.seed));
    Ok(records)
}

fn csv_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::io(path, e)
}

/// Wide table with one row per logged epoch and one accuracy column per task.
pub fn curves_csv(records: &[ResultRecord], path: &Path) -> Result<Vec<u8>> {
    let tasks = records.iter().map(|r| r.tasks).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["seed", "method", "task", "phase", "epoch", "loss", "train_acc"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=tasks).map(|t| format!("acc_task{t}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in records {
        for e in &r.log.records {
            let mut acc = vec![String::new(); tasks];
            match e.phase {
                // Consolidation scores every task seen so far.
                TrainPhase::Consolidate => {
                    for (j, a) in e.eval_acc.iter().enumerate().take(tasks) {
                        acc[j] = a.to_string();
                    }
                }
                _ => {
                    if let (Some(a), Some(slot)) = (e.eval_acc.first(), acc.get_mut(e.task.saturating_sub(1))) {
                        *slot = a.to_string();
                    }
                }
            }
            let mut row = vec![
                r.seed.to_string(),
                r.method.clone(),
                e.task.to_string(),
                e.phase.name().to_string(),
                e.epoch.to_string(),
                e.loss.to_string(),
                e.train_acc.to_string(),
            ];
            row.extend(acc);
            w.write_record(&row).map_err(|e| csv_error(path, e))?;
        }
    }
    w.into_inner().map_err(|e| csv_error(path, e))
}

/// `mean ± std` in percentage points, sample standard deviation.
pub fn format_pp(a: &Aggregate) -> String {
    format!("{:.2} ± {:.2}", 100.0 * a.mean, 100.0 * a.std)
}

pub fn summary_csv(records: &[ResultRecord], path: &Path) -> Result<Vec<u8>> {
    let mut groups: BTreeMap<(String, usize), Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.method.clone(), r.tasks)).or_default().push(r);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "tasks", "metric", "value"]).map_err(|e| csv_error(path, e))?;
    for ((method, tasks), rs) in groups {
        let metrics: [(&str, Vec<Option<f64>>); 5] = [
            ("final_acc", rs.iter().map(|r| Some(r.final_acc)).collect()),
            ("acc", rs.iter().map(|r| r.metrics.as_ref().map(|m| m.acc)).collect()),
            ("bwt", rs.iter().map(|r| r.metrics.as_ref().and_then(|m| m.bwt)).collect()),
            ("fwt", rs.iter().map(|r| r.metrics.as_ref().and_then(|m| m.fwt)).collect()),
            ("af", rs.iter().map(|r| r.metrics.as_ref().and_then(|m| m.af)).collect()),
        ];
        for (name, values) in metrics {
            let Some(values) = values.into_iter().collect::<Option<Vec<f64>>>() else {
                continue;
            };
            if let Some(a) = Aggregate::of(&values) {
                w.write_record([method.clone(), tasks.to_string(), name.to_string(), format_pp(&a)])
                    .map_err(|e| csv_error(path, e))?;
            }
        }
    }
    w.into_inner().map_err(|e| csv_error(path, e))
}

/// Writes `curves.csv` and `summary.csv` into `dir`. Fails when `dir` holds
/// no seed records.
pub fn emit_curves(dir: &Path) -> Result<()> {
    let records = load_records(dir)?;
    if records.is_empty() {
        return Err(CliError::io(dir, "no seed-*/record.json files to plot"));
    }
    let curves = dir.join("curves.csv");
    write_atomic(&curves, &curves_csv(&records, &curves)?)?;
    let summary = dir.join("summary.csv");
    write_atomic(&summary, &summary_csv(&records, &summary)?)
}
