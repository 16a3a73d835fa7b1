//! Command-line surface of the `cmn` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use cmn_core::metrics::{MetricSummary, Required};
use cmn_core::tasks::Which;
use cmn_core::trainer::{evaluate_network, run_sequence};
use cmn_core::{AccuracyMatrix, BaselineAccuracies, CmnState, Dtype, ParamReport, Scalar};

use crate::checkpoint;
use crate::config::{ExperimentConfig, Method};
use crate::curves::{emit_curves, format_pp, load_records};
use crate::error::{CliError, Result};
use crate::experiment::{run_experiment, RunOptions};
use crate::record::{check_metrics, MetricsFile};

#[derive(Debug, Parser)]
#[command(name = "cmn", version, about = "Cycled memory network experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a config over its seeds and write results.
    Run(RunArgs),
    /// Verify a run directory, or compute metrics from an accuracy-matrix CSV.
    Metrics(MetricsArgs),
    /// Regenerate curves.csv and summary.csv for a run directory.
    Curves { dir: PathBuf },
    /// Save or inspect model checkpoints.
    #[command(subcommand)]
    Checkpoint(CheckpointCommand),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Cap every phase at this many epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// A run directory or a matrix CSV.
    pub input: PathBuf,
    /// `task,m,n,b` CSV of reference accuracies (matrix input only).
    #[arg(long)]
    pub baselines: Option<PathBuf>,
    #[arg(long)]
    pub skip_af: bool,
    #[arg(long)]
    pub skip_fwt: bool,
}

#[derive(Debug, Subcommand)]
pub enum CheckpointCommand {
    /// Train a config for one seed and save the final state.
    Save {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Verify a checkpoint; with `--config`, also score it on the config's tasks.
    Load {
        file: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.6}"))
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Run(args) => cmd_run(args, out),
        Command::Metrics(args) => cmd_metrics(args, out),
        Command::Curves { dir } => {
            emit_curves(&dir)?;
            say(out, format!("wrote {} and {}", dir.join("curves.csv").display(), dir.join("summary.csv").display()))
        }
        Command::Checkpoint(CheckpointCommand::Save { config, out: file, seed, epochs }) => {
            cmd_checkpoint_save(&config, &file, seed, epochs, out)
        }
        Command::Checkpoint(CheckpointCommand::Load { file, config }) => cmd_checkpoint_load(&file, config.as_deref(), out),
    }
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| CliError::io("<stdout>", e))
}

fn cmd_run(args: RunArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let opts = RunOptions {
        seed: args.seed,
        out: args.out,
        epochs: args.epochs,
        threads: args.threads,
    };
    let result = run_experiment(&cfg, &stem(&args.config), &opts)?;
    say(out, format!("{} -> {}", cfg.method, result.dir.display()))?;
    for s in &result.metrics.seeds {
        let m = s.metrics.as_ref();
        say(
            out,
            format!(
                "seed {}: final_acc {:.4} bwt {} fwt {} af {}",
                s.seed,
                s.final_acc,
                fmt_opt(m.and_then(|m| m.bwt)),
                fmt_opt(m.and_then(|m| m.fwt)),
                fmt_opt(m.and_then(|m| m.af)),
            ),
        )?;
    }
    for (name, agg) in &result.metrics.summary {
        say(out, format!("{name}: {} pp over {} seeds", format_pp(agg), agg.n))?;
    }
    Ok(())
}

fn cmd_metrics(args: MetricsArgs, out: &mut dyn Write) -> Result<()> {
    if args.input.is_dir() {
        if args.baselines.is_some() {
            return Err(CliError::Usage("--baselines applies to a matrix CSV, not a run directory".into()));
        }
        return verify_dir(&args.input, out);
    }
    let matrix = AccuracyMatrix::load_csv(&args.input)?;
    let base = match &args.baselines {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            BaselineAccuracies::from_csv_str(&text, &p.display().to_string())?
        }
        None => BaselineAccuracies::default(),
    };
    let given = args.baselines.is_some();
    let required = Required {
        af: given && !args.skip_af,
        fwt: given && !args.skip_fwt,
    };
    let mut summary = MetricSummary::compute(&matrix, &base, required)?;
    if args.skip_af {
        summary.af = None;
    }
    if args.skip_fwt {
        summary.fwt = None;
    }
    let json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Inconsistent(e.to_string()))?;
    say(out, json)
}

/// Recomputes every record's metrics and compares them with `metrics.json`.
fn verify_dir(dir: &Path, out: &mut dyn Write) -> Result<()> {
    let records = load_records(dir)?;
    if records.is_empty() {
        return Err(CliError::io(dir, "no seed-*/record.json files"));
    }
    for r in &records {
        r.verify()?;
    }
    let stored_path = dir.join("metrics.json");
    if stored_path.is_file() {
        let stored: MetricsFile = crate::io::read_json(&stored_path)?;
        for s in &stored.seeds {
            let r = records
                .iter()
                .find(|r| r.seed == s.seed && r.method == stored.method)
                .ok_or_else(|| CliError::Inconsistent(format!("metrics.json lists seed {} without a record", s.seed)))?;
            match (&s.metrics, &r.metrics) {
                (Some(a), Some(b)) => check_metrics(a, b)?,
                (None, None) => {}
                _ => return Err(CliError::Inconsistent(format!("seed {}: metrics present in only one file", s.seed))),
            }
            if (s.final_acc - r.final_acc).abs() > crate::record::METRIC_TOLERANCE {
                return Err(CliError::Inconsistent(format!("seed {}: final_acc differs", s.seed)));
            }
        }
    }
    for r in &records {
        let m = r.metrics.as_ref();
        say(
            out,
            format!(
                "{} seed {}: acc {:.6} bwt {} fwt {} af {} (verified)",
                r.method,
                r.seed,
                r.final_acc,
                fmt_opt(m.and_then(|m| m.bwt)),
                fmt_opt(m.and_then(|m| m.fwt)),
                fmt_opt(m.and_then(|m| m.af)),
            ),
        )?;
    }
    Ok(())
}

fn cmd_checkpoint_save(config: &Path, file: &Path, seed: Option<u64>, epochs: Option<usize>, out: &mut dyn Write) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if cfg.method != Method::Cmn {
        return Err(CliError::config("method", "checkpoints are written for `cmn` runs only"));
    }
    if let Some(e) = epochs {
        if e == 0 {
            return Err(CliError::config("epochs", "must be at least 1"));
        }
        cfg = cfg.with_epochs(e);
    }
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let row = match cfg.dtype {
        Dtype::F32 => save_typed::<f32>(&cfg, seed, file)?,
        Dtype::F64 => save_typed::<f64>(&cfg, seed, file)?,
    };
    say(out, format!("saved {}", file.display()))?;
    say(out, format!("final accuracies: {}", join(&row)))
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn save_typed<T: Scalar>(cfg: &ExperimentConfig, seed: u64, file: &Path) -> Result<Vec<f64>> {
    let tasks = cfg.tasks(seed)?;
    let mut rc = cfg.run_config(tasks.input());
    rc.curves = false;
    let run = run_sequence::<T>(&tasks, &rc, seed)?;
    checkpoint::save(file, &run.state, Some(cfg.digest()), Some(seed))?;
    let last = tasks.len() - 1;
    Ok((0..tasks.len()).map(|j| run.matrix.get(last, j).unwrap_or(f64::NAN)).collect())
}

fn cmd_checkpoint_load(file: &Path, config: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let manifest = checkpoint::read_manifest(file)?;
    match manifest.dtype {
        Dtype::F32 => load_typed::<f32>(file, config, out),
        Dtype::F64 => load_typed::<f64>(file, config, out),
    }
}

fn load_typed<T: Scalar>(file: &Path, config: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let (manifest, state): (_, CmnState<T>) = checkpoint::load(file)?;
    let params = ParamReport::for_state(&state);
    say(
        out,
        format!(
            "checkpoint {}: dtype {}, {} tasks, phase {:?}, {} test parameters, {} training parameters",
            file.display(),
            manifest.dtype,
            manifest.task_index,
            manifest.phase,
            params.test_params,
            params.training_params
        ),
    )?;
    let Some(config) = config else {
        return Ok(());
    };
    let cfg = ExperimentConfig::load(config)?;
    if manifest.config_digest.as_deref() != Some(cfg.digest().as_str()) {
        return Err(CliError::Inconsistent(format!(
            "checkpoint was written for config digest {}, {} has {}",
            manifest.config_digest.as_deref().unwrap_or("<none>"),
            config.display(),
            cfg.digest()
        )));
    }
    let tasks = cfg.tasks(manifest.seed.unwrap_or(cfg.seeds[0]))?;
    let long = state.long_net()?;
    let mut accs = Vec::new();
    for t in tasks.tasks.iter().take(manifest.task_index) {
        let range = match cfg.eval_scope {
            cmn_core::trainer::EvalScope::ClassIncremental => 0..long.head_dim(),
            cmn_core::trainer::EvalScope::TaskAware => t.global_classes(),
        };
        accs.push(evaluate_network(long, t, Which::Test, range)?);
    }
    say(out, format!("final accuracies: {}", join(&accs)))
}
