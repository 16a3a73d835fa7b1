//! Accuracy-matrix metrics, iteration time and parameter accounting.
//!
//! `R[i][j]` is the accuracy on task `j` after task `i` (0-based here; the
//! formulas below are written 1-based).

use std::fmt::Write as _;
use std::path::Path;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CmnState;
use crate::nn::{count_params, Parameters};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Result<Self> {
        if tasks == 0 {
            return Err(Error::Metric("an accuracy matrix needs at least one task".into()));
        }
        Ok(AccuracyMatrix {
            rows: vec![vec![None; tasks]; tasks],
        })
    }

    /// Builds from rows; `None` marks a missing entry.
    pub fn from_rows(rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let mut m = Self::new(rows.len())?;
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != m.tasks() {
                return Err(Error::Metric(format!("row {i} has {} entries, expected {}", row.len(), m.tasks())));
            }
            for (j, v) in row.into_iter().enumerate() {
                if let Some(v) = v {
                    m.set(i, j, v)?;
                }
            }
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) -> Result<()> {
        let t = self.tasks();
        if i >= t || j >= t {
            return Err(Error::Metric(format!("entry ({i}, {j}) outside a {t}×{t} matrix")));
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Metric(format!("accuracy {value} at ({i}, {j}) is outside [0, 1]")));
        }
        self.rows[i][j] = Some(value);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied().flatten()
    }

    fn need(&self, i: usize, j: usize) -> Result<f64> {
        self.get(i, j)
            .ok_or_else(|| Error::Metric(format!("accuracy matrix entry ({}, {}) is missing", i + 1, j + 1)))
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.rows
    }

    /// One line per row, empty fields for missing entries.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .map(|v| v.map(|x| format!("{x}")).unwrap_or_default())
                .collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    /// Parses a headerless square CSV with optional empty cells.
    pub fn from_csv_str(text: &str, origin: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for (r, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Csv {
                path: origin.into(),
                row: r + 1,
                column: 0,
                message: e.to_string(),
            })?;
            let row = rec
                .iter()
                .enumerate()
                .map(|(c, field)| {
                    let field = field.trim();
                    if field.is_empty() {
                        return Ok(None);
                    }
                    field.parse::<f64>().map(Some).map_err(|e| Error::Csv {
                        path: origin.into(),
                        row: r + 1,
                        column: c + 1,
                        message: e.to_string(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::from_rows(rows)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_csv_str(&text, &path.display().to_string())
    }
}

/// Final average accuracy: `(1/T) Σ_j R[T][j]`.
pub fn acc(r: &AccuracyMatrix) -> Result<f64> {
    let t = r.tasks();
    let mut s = 0.0;
    for j in 0..t {
        s += r.need(t - 1, j)?;
    }
    Ok(s / t as f64)
}

/// Backward transfer: `(1/(T−1)) Σ_{i<T} (R[T][i] − R[i][i])`.
pub fn bwt(r: &AccuracyMatrix) -> Result<f64> {
    let t = r.tasks();
    if t < 2 {
        return Err(Error::Metric("backward transfer needs at least two tasks".into()));
    }
    let mut s = 0.0;
    for i in 0..t - 1 {
        s += r.need(t - 1, i)? - r.need(i, i)?;
    }
    Ok(s / (t - 1) as f64)
}

/// Forward transfer: `(1/(T−1)) Σ_{i≥2} (R[i−1][i] − b_i)`.
pub fn fwt(r: &AccuracyMatrix, b: &[f64]) -> Result<f64> {
    let t = r.tasks();
    if t < 2 {
        return Err(Error::Metric("forward transfer needs at least two tasks".into()));
    }
    check_len("b", b, t)?;
    let mut s = 0.0;
    for i in 1..t {
        s += r.need(i - 1, i)? - b[i];
    }
    Ok(s / (t - 1) as f64)
}

/// Mean accuracy after task `i` over the tasks seen so far.
pub fn seen_average(r: &AccuracyMatrix, i: usize) -> Result<f64> {
    let mut s = 0.0;
    for j in 0..=i {
        s += r.need(i, j)?;
    }
    Ok(s / (i + 1) as f64)
}

/// Anterograde forgetting: the average gap of the seen-task accuracy to joint
/// training plus the average gap of the just-learned task to a single model,
/// both over tasks 2..T.
pub fn af(r: &AccuracyMatrix, m: &[f64], n: &[f64]) -> Result<f64> {
    let t = r.tasks();
    if t < 2 {
        return Err(Error::Metric("anterograde forgetting is undefined for a single task".into()));
    }
    check_len("m", m, t)?;
    check_len("n", n, t)?;
    let mut joint_gap = 0.0;
    let mut single_gap = 0.0;
    for i in 1..t {
        joint_gap += seen_average(r, i)? - n[i];
        single_gap += r.need(i, i)? - m[i];
    }
    let d = (t - 1) as f64;
    Ok(joint_gap / d + single_gap / d)
}

fn check_len(name: &str, v: &[f64], t: usize) -> Result<()> {
    if v.len() != t {
        return Err(Error::Metric(format!("baseline vector {name} has {} entries for {t} tasks", v.len())));
    }
    if let Some(x) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Metric(format!("baseline {name} entry {x} is outside [0, 1]")));
    }
    Ok(())
}

/// Batches per epoch for `samples` stored examples, exactly.
pub fn iteration_time(samples: u64, batch_size: u64) -> Result<Ratio<u64>> {
    if batch_size == 0 {
        return Err(Error::Metric("batch size must be positive".into()));
    }
    Ok(Ratio::new(samples, batch_size))
}

/// Per-task reference accuracies.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineAccuracies {
    /// Independently trained single-task networks.
    pub m: Option<Vec<f64>>,
    /// Jointly trained networks; entry `i` is the mean accuracy over tasks
    /// `1..=i` of a network trained on their union.
    pub n: Option<Vec<f64>>,
    /// Untrained networks, for forward transfer.
    pub b: Option<Vec<f64>>,
}

impl BaselineAccuracies {
    /// Parses `task,m,n,b` CSV; any column may be blank throughout.
    pub fn from_csv_str(text: &str, origin: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| Error::Csv {
                path: origin.into(),
                row: 0,
                column: 0,
                message: e.to_string(),
            })?
            .clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name);
        let cols = [col("m"), col("n"), col("b")];
        let mut vals: [Vec<Option<f64>>; 3] = Default::default();
        for (r, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Csv {
                path: origin.into(),
                row: r + 1,
                column: 0,
                message: e.to_string(),
            })?;
            for (k, c) in cols.iter().enumerate() {
                let Some(c) = *c else { continue };
                let field = rec.get(c).unwrap_or("").trim();
                let v = if field.is_empty() {
                    None
                } else {
                    Some(field.parse::<f64>().map_err(|e| Error::Csv {
                        path: origin.into(),
                        row: r + 1,
                        column: c + 1,
                        message: e.to_string(),
                    })?)
                };
                vals[k].push(v);
            }
        }
        let finish = |v: &Vec<Option<f64>>| -> Option<Vec<f64>> {
            if v.is_empty() || v.iter().any(|x| x.is_none()) {
                None
            } else {
                Some(v.iter().map(|x| x.unwrap()).collect())
            }
        };
        Ok(BaselineAccuracies {
            m: finish(&vals[0]),
            n: finish(&vals[1]),
            b: finish(&vals[2]),
        })
    }

    pub fn to_csv(&self, tasks: usize) -> String {
        let mut out = String::from("task,m,n,b\n");
        let cell = |v: &Option<Vec<f64>>, i: usize| v.as_ref().and_then(|v| v.get(i)).map(|x| format!("{x}")).unwrap_or_default();
        for i in 0..tasks {
            let _ = writeln!(out, "{},{},{},{}", i + 1, cell(&self.m, i), cell(&self.n, i), cell(&self.b, i));
        }
        out
    }
}

/// Which metrics a caller insists on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Required {
    pub fwt: bool,
    pub af: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub acc: f64,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
    pub af: Option<f64>,
}

impl MetricSummary {
    /// Every metric the inputs support. Metrics listed in `required` must be
    /// computable or this errors.
    pub fn compute(r: &AccuracyMatrix, base: &BaselineAccuracies, required: Required) -> Result<Self> {
        let multi = r.tasks() >= 2;
        let fwt = match (&base.b, multi) {
            (Some(b), true) => Some(fwt(r, b)?),
            _ if required.fwt => {
                return Err(Error::Metric("forward transfer requested but b or a second task is missing".into()))
            }
            _ => None,
        };
        let af = match (&base.m, &base.n, multi) {
            (Some(m), Some(n), true) => Some(af(r, m, n)?),
            _ if required.af => {
                let missing: Vec<&str> = [("m", base.m.is_none()), ("n", base.n.is_none())]
                    .iter()
                    .filter(|(_, miss)| *miss)
                    .map(|(k, _)| *k)
                    .collect();
                return Err(Error::Metric(if missing.is_empty() {
                    "anterograde forgetting requested for a single task".into()
                } else {
                    format!("anterograde forgetting requested but baseline {} is missing", missing.join(" and "))
                }));
            }
            _ => None,
        };
        Ok(MetricSummary {
            acc: acc(r)?,
            bwt: if multi { Some(bwt(r)?) } else { None },
            fwt,
            af,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    /// Parameters needed for inference.
    pub test_params: usize,
    /// Parameters held while learning a task.
    pub training_params: usize,
}

impl ParamReport {
    /// Long-term network at test time; both networks and the links in training.
    pub fn for_state<T: Scalar>(state: &CmnState<T>) -> Self {
        let long = state.long.as_ref().map_or(0, |l| count_params(l));
        let short = state.short.as_ref().map_or(0, |s| count_params(s));
        ParamReport {
            test_params: long,
            training_params: long + short + count_params(state.links.as_slice()),
        }
    }

    /// A plain network, identical in both roles.
    pub fn single<T: Scalar, P: Parameters<T> + ?Sized>(net: &P) -> Self {
        let n = count_params(net);
        ParamReport {
            test_params: n,
            training_params: n,
        }
    }
}
