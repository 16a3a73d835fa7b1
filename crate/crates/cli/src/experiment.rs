//! Runs an experiment config over its seeds and writes the results.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cmn_core::baselines::{random_init_accuracies, run_baseline, run_transfer_ablation, BaselineKind};
use cmn_core::metrics::{MetricSummary, Required};
use cmn_core::Ratio;
use cmn_core::trainer::run_sequence;
use cmn_core::{BaselineAccuracies, Dtype, Scalar, TaskSequence};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Method};
use crate::curves;
use crate::error::{CliError, Result};
use crate::io::{write_atomic, write_json};
use crate::record::{IterationTime, MetricsFile, ResultRecord, SCHEMA_VERSION};

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Run only this seed instead of the configured list.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Cap on epochs per phase.
    pub epochs: Option<usize>,
    /// Worker threads; all cores when absent.
    pub threads: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub dir: PathBuf,
    pub records: Vec<ResultRecord>,
    pub metrics: MetricsFile,
}

/// Output directory: `--out`, then the config's `output`, then
/// `$CMN_OUTPUT_ROOT/<name>`, then `runs/<name>`.
pub fn output_dir(cfg: &ExperimentConfig, name: &str, out: Option<&Path>) -> PathBuf {
    if let Some(out) = out {
        return out.to_path_buf();
    }
    if let Some(out) = &cfg.output {
        return out.clone();
    }
    let root = std::env::var_os("CMN_OUTPUT_ROOT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(cfg.label(name))
}

fn ratio(r: Ratio<u64>) -> IterationTime {
    IterationTime {
        numerator: *r.numer(),
        denominator: *r.denom(),
        value: *r.numer() as f64 / *r.denom() as f64,
    }
}

/// Trains one seed. Deterministic given the config and seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<ResultRecord> {
    match cfg.dtype {
        Dtype::F32 => run_seed_typed::<f32>(cfg, seed),
        Dtype::F64 => run_seed_typed::<f64>(cfg, seed),
    }
}

fn reference_baselines<T: Scalar>(
    cfg: &ExperimentConfig,
    tasks: &TaskSequence,
    rc: &cmn_core::RunConfig,
    seed: u64,
) -> Result<BaselineAccuracies> {
    let mut rc = rc.clone();
    rc.curves = false;
    let mut base = BaselineAccuracies::default();
    if cfg.metrics.af && tasks.len() >= 2 {
        base.m = Some(run_baseline::<T>(BaselineKind::One, tasks, &rc, seed)?.per_task);
        base.n = Some(run_baseline::<T>(BaselineKind::Joint, tasks, &rc, seed)?.per_task);
    }
    if cfg.metrics.fwt && tasks.len() >= 2 {
        base.b = Some(random_init_accuracies::<T>(tasks, &rc, seed, cfg.metrics.random_inits)?);
    }
    Ok(base)
}

fn run_seed_typed<T: Scalar>(cfg: &ExperimentConfig, seed: u64) -> Result<ResultRecord> {
    let start = Instant::now();
    let tasks = cfg.tasks(seed)?;
    let rc = cfg.run_config(tasks.input());
    let multi = tasks.len() >= 2;
    let required = Required {
        af: cfg.metrics.af && multi,
        fwt: cfg.metrics.fwt && multi,
    };
    let mut record = ResultRecord {
        schema_version: SCHEMA_VERSION,
        config_digest: cfg.digest(),
        method: cfg.method.to_string(),
        seed,
        dtype: cfg.dtype,
        tasks: tasks.len(),
        matrix: None,
        baselines: BaselineAccuracies::default(),
        metrics: None,
        per_task: Vec::new(),
        final_acc: 0.0,
        curve: None,
        params: None,
        iteration_time: None,
        wall_time_secs: 0.0,
        log: Default::default(),
        freeze_checks: Vec::new(),
    };
    match cfg.method {
        Method::Cmn => {
            let out = run_sequence::<T>(&tasks, &rc, seed)?;
            record.baselines = reference_baselines::<T>(cfg, &tasks, &rc, seed)?;
            let metrics = MetricSummary::compute(&out.matrix, &record.baselines, required)?;
            record.per_task = (0..tasks.len()).map(|i| out.matrix.get(i, i).unwrap_or(0.0)).collect();
            record.final_acc = metrics.acc;
            record.metrics = Some(metrics);
            record.matrix = Some(out.matrix);
            record.params = Some(out.params);
            record.iteration_time = Some(ratio(out.iteration_time));
            record.log = out.log;
            record.freeze_checks = out.freeze_checks;
        }
        Method::Baseline(kind) => {
            let out = run_baseline::<T>(kind, &tasks, &rc, seed)?;
            if let Some(matrix) = out.matrix {
                record.baselines = reference_baselines::<T>(cfg, &tasks, &rc, seed)?;
                let metrics = MetricSummary::compute(&matrix, &record.baselines, required)?;
                record.final_acc = metrics.acc;
                record.metrics = Some(metrics);
                record.matrix = Some(matrix);
            } else {
                record.final_acc = out.per_task.iter().sum::<f64>() / out.per_task.len() as f64;
            }
            record.per_task = out.per_task;
            record.params = Some(out.params);
            record.iteration_time = Some(ratio(out.iteration_time));
            record.log = out.log;
        }
        Method::Ablation(strategy) => {
            let out = run_transfer_ablation::<T>(strategy, &tasks, &rc, seed)?;
            record.per_task = vec![out.final_acc];
            record.final_acc = out.final_acc;
            record.curve = Some(out.curve);
            record.log = out.log;
        }
    }
    record.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(record)
}

/// Runs every seed (in parallel) and writes `dir/seed-<s>/…`, `metrics.json`,
/// `curves.csv` and `summary.csv`.
pub fn run_experiment(cfg: &ExperimentConfig, name: &str, opts: &RunOptions) -> Result<ExperimentOutput> {
    let cfg = match opts.epochs {
        Some(e) => cfg.clone().with_epochs(e),
        None => cfg.clone(),
    };
    if opts.epochs == Some(0) {
        return Err(CliError::config("epochs", "must be at least 1"));
    }
    let seeds = match opts.seed {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    };
    let dir = output_dir(&cfg, name, opts.out.as_deref());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker threads: {e}")))?;
    let records: Vec<ResultRecord> = pool.install(|| seeds.par_iter().map(|&s| run_seed(&cfg, s)).collect::<Result<_>>())?;
    for r in &records {
        r.verify()?;
        write_seed(&dir, r)?;
    }
    let metrics = MetricsFile::from_records(&records)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    write_json(&dir.join("config.json"), &cfg)?;
    curves::emit_curves(&dir)?;
    Ok(ExperimentOutput { dir, records, metrics })
}

pub fn seed_dir(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed-{seed}"))
}

fn write_seed(dir: &Path, r: &ResultRecord) -> Result<()> {
    let sd = seed_dir(dir, r.seed);
    write_json(&sd.join("record.json"), r)?;
    if let Some(m) = &r.matrix {
        write_atomic(&sd.join("matrix.csv"), m.to_csv().as_bytes())?;
        write_atomic(&sd.join("baselines.csv"), r.baselines.to_csv(r.tasks).as_bytes())?;
    }
    Ok(())
}
