//! Reference learners and the transfer-strategy ablation.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{iteration_time, AccuracyMatrix, ParamReport};
use crate::model::CmnState;
use crate::nn::{init_params, NetworkParams};
use crate::rng;
use crate::scalar::Scalar;
use crate::tasks::{gen_noise_task, gen_synthetic_tasks, Provenance, SyntheticSpec, TaskDataset, TaskSequence, Which};
use crate::trainer::{
    evaluate_network, shuffle_stream, train_plain, train_short_phase, EvalScope, Phase, RunConfig, TrainLog,
};
use crate::transfer::TransferStrategy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// A separate network per task, initialized like that task's short-term network.
    One,
    /// One network per prefix of the sequence, trained on the union of its tasks.
    Joint,
    /// A single network trained task after task with a growing head.
    Finetune,
    /// A separate network per task from an unrelated initialization.
    Scratch,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [BaselineKind::One, BaselineKind::Joint, BaselineKind::Finetune, BaselineKind::Scratch];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::One => "one",
            BaselineKind::Joint => "joint",
            BaselineKind::Finetune => "finetune",
            BaselineKind::Scratch => "scratch",
        }
    }
}

#[derive(Clone, Debug)]
pub struct BaselineOutput {
    pub kind: BaselineKind,
    /// `one`/`scratch`: accuracy on each task. `joint`: entry `i` is the mean
    /// accuracy over tasks `≤ i` of the network trained on their union.
    /// `finetune`: the diagonal of its matrix.
    pub per_task: Vec<f64>,
    pub matrix: Option<AccuracyMatrix>,
    pub params: ParamReport,
    pub iteration_time: Ratio<u64>,
    pub log: TrainLog,
}

fn scoped(scope: EvalScope, task: &TaskDataset, head: usize) -> std::ops::Range<usize> {
    match scope {
        EvalScope::ClassIncremental => 0..head,
        EvalScope::TaskAware => task.global_classes(),
    }
}

/// Trains the chosen reference learner. All of them use the short-phase
/// optimizer settings.
pub fn run_baseline<T: Scalar>(kind: BaselineKind, tasks: &TaskSequence, cfg: &RunConfig, seed: u64) -> Result<BaselineOutput> {
    cfg.validate()?;
    let backbone = &cfg.model.backbone;
    let init = cfg.model.init;
    let opt = &cfg.short;
    let mut log = TrainLog::default();
    let batches = |n: usize| iteration_time(n as u64, opt.batch_size as u64);
    match kind {
        BaselineKind::One | BaselineKind::Scratch => {
            let mut per_task = Vec::new();
            let mut last = None;
            for (k, task) in tasks.tasks.iter().enumerate() {
                let (init_seed, shuffle) = match kind {
                    BaselineKind::One => (
                        rng::derive(seed, &[rng::tag("short"), k as u64]),
                        shuffle_stream(seed, Phase::Short, k),
                    ),
                    _ => (
                        rng::derive(seed, &[rng::tag("scratch"), k as u64]),
                        rng::stream(seed, &[rng::tag("scratch-shuffle"), k as u64]),
                    ),
                };
                let mut net = init_params::<T>(&backbone.with_head(task.classes), init, init_seed)?;
                train_plain(&mut net, task, task.offset, opt, shuffle, k + 1, cfg.curves, &mut log)?;
                per_task.push(accuracy_own_head(&net, task)?);
                last = Some(net);
            }
            let net = last.expect("sequence is non-empty");
            let largest = tasks.tasks.iter().map(|t| t.train.len()).max().unwrap_or(0);
            Ok(BaselineOutput {
                kind,
                per_task,
                matrix: None,
                params: ParamReport::single(&net),
                iteration_time: batches(largest)?,
                log,
            })
        }
        BaselineKind::Joint => {
            let mut per_task = Vec::new();
            let mut last = None;
            for i in 0..tasks.len() {
                let union = TaskDataset::union("joint", &tasks.tasks[..=i])?;
                let mut net = init_params::<T>(
                    &backbone.with_head(union.classes),
                    init,
                    rng::derive(seed, &[rng::tag("joint"), i as u64]),
                )?;
                let shuffle = rng::stream(seed, &[rng::tag("joint-shuffle"), i as u64]);
                train_plain(&mut net, &union, 0, opt, shuffle, i + 1, cfg.curves, &mut log)?;
                let mut sum = 0.0;
                for t in &tasks.tasks[..=i] {
                    sum += evaluate_network(&net, t, Which::Test, scoped(cfg.eval_scope, t, net.head_dim()))?;
                }
                per_task.push(sum / (i + 1) as f64);
                last = Some((net, union.train.len()));
            }
            let (net, n) = last.expect("sequence is non-empty");
            Ok(BaselineOutput {
                kind,
                per_task,
                matrix: None,
                params: ParamReport::single(&net),
                iteration_time: batches(n)?,
                log,
            })
        }
        BaselineKind::Finetune => {
            let first = &tasks.tasks[0];
            let mut net = init_params::<T>(
                &backbone.with_head(first.classes),
                init,
                rng::derive(seed, &[rng::tag("short"), 0]),
            )?;
            let mut matrix = AccuracyMatrix::new(tasks.len())?;
            for (k, task) in tasks.tasks.iter().enumerate() {
                if k > 0 {
                    net.expand_head(task.classes, &mut rng::stream(seed, &[rng::tag("head"), k as u64]))?;
                    let range = scoped(cfg.eval_scope, task, net.head_dim());
                    matrix.set(k - 1, k, evaluate_network(&net, task, Which::Test, range)?)?;
                }
                train_plain(&mut net, task, 0, opt, shuffle_stream(seed, Phase::Short, k), k + 1, cfg.curves, &mut log)?;
                for (j, seen) in tasks.tasks[..=k].iter().enumerate() {
                    let range = scoped(cfg.eval_scope, seen, net.head_dim());
                    matrix.set(k, j, evaluate_network(&net, seen, Which::Test, range)?)?;
                }
            }
            let per_task = (0..tasks.len()).map(|i| matrix.get(i, i).unwrap_or(0.0)).collect();
            let largest = tasks.tasks.iter().map(|t| t.train.len()).max().unwrap_or(0);
            Ok(BaselineOutput {
                kind,
                per_task,
                matrix: Some(matrix),
                params: ParamReport::single(&net),
                iteration_time: batches(largest)?,
                log,
            })
        }
    }
}

fn accuracy_own_head<T: Scalar>(net: &NetworkParams<T>, task: &TaskDataset) -> Result<f64> {
    let local = TaskDataset {
        offset: 0,
        ..task.clone()
    };
    evaluate_network(net, &local, Which::Test, 0..task.classes)
}

/// Accuracy of untrained networks on each task, averaged over `inits`
/// initializations. Task `i` is scored with a head as wide as the long-term
/// network's when it first meets that task.
pub fn random_init_accuracies<T: Scalar>(tasks: &TaskSequence, cfg: &RunConfig, seed: u64, inits: usize) -> Result<Vec<f64>> {
    if inits == 0 {
        return Err(Error::invalid("at least one initialization is required"));
    }
    tasks
        .tasks
        .iter()
        .enumerate()
        .map(|(i, task)| {
            let head = task.offset + task.classes;
            let spec = cfg.model.backbone.with_head(head);
            let mut sum = 0.0;
            for r in 0..inits {
                let net = init_params::<T>(&spec, cfg.model.init, rng::derive(seed, &[rng::tag("random"), i as u64, r as u64]))?;
                sum += evaluate_network(&net, task, Which::Test, scoped(cfg.eval_scope, task, head))?;
            }
            Ok(sum / inits as f64)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct AblationOutput {
    pub strategy: TransferStrategy,
    /// Target-task test accuracy after each epoch.
    pub curve: Vec<f64>,
    pub final_acc: f64,
    pub log: TrainLog,
}

/// Trains a long-term network on the first task of `pair`, then a short-term
/// network on the second task that reads from it through `strategy`.
pub fn run_transfer_ablation<T: Scalar>(
    strategy: TransferStrategy,
    pair: &TaskSequence,
    cfg: &RunConfig,
    seed: u64,
) -> Result<AblationOutput> {
    if pair.len() != 2 {
        return Err(Error::invalid(format!("a transfer ablation needs exactly 2 tasks, got {}", pair.len())));
    }
    let mut cfg = cfg.clone();
    cfg.model.strategy = strategy;
    cfg.validate()?;
    let mut state = CmnState::<T>::new(cfg.model.clone())?;
    let mut log = TrainLog::default();
    let (source, target) = (&pair.tasks[0], &pair.tasks[1]);
    state.begin_task(source.classes, seed)?;
    train_short_phase(&mut state, source, &cfg.short, seed, false, &mut log)?;
    state.promote_first_task()?;
    state.begin_task(target.classes, seed)?;
    train_short_phase(&mut state, target, &cfg.short, seed, true, &mut log)?;
    let curve: Vec<f64> = log.phase(2, Phase::Short).filter_map(|r| r.eval_acc.first().copied()).collect();
    let final_acc = *curve.last().ok_or_else(|| Error::invalid("no target-task epochs were run"))?;
    Ok(AblationOutput {
        strategy,
        curve,
        final_acc,
        log,
    })
}

/// Source tasks for the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSource {
    /// Unlearnable noise with the target's input shape and class count.
    Noise,
    /// A task whose class centers share most of their direction with the target's.
    Related,
}

/// Source and target tasks. The target is the second task generated from
/// `target`; a related source is the first task of the same sequence.
pub fn transfer_pair(source: AblationSource, target: &SyntheticSpec, noise_samples: usize) -> Result<TaskSequence> {
    let seq = gen_synthetic_tasks(target, 2)?;
    let mut tasks = seq.tasks;
    let tgt = tasks.pop().expect("two tasks");
    let src = match source {
        AblationSource::Related => tasks.pop().expect("two tasks"),
        AblationSource::Noise => gen_noise_task(target.input, target.classes_per_task, noise_samples, target.seed)?,
    };
    let provenance = match source {
        AblationSource::Related => Provenance::Synthetic,
        AblationSource::Noise => Provenance::Mixed,
    };
    TaskSequence::new(vec![src, tgt], provenance)
}
