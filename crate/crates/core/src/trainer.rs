//! SGD and the two-phase training loop over a task sequence.

use std::ops::Range;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::consolidation::{hard_cross_entropy, loss_total, ConsolidationConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::metrics::{iteration_time, AccuracyMatrix, ParamReport};
use crate::model::{param_digest, predict_rows, CmnState, ModelConfig, Scope};
use crate::nn::{forward_plain, NetworkParams, Parameters};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tasks::{TaskDataset, TaskSequence, Which};
use crate::tensor::Tensor;

/// Loss above which training is considered diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Rows evaluated per forward pass.
const EVAL_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Stop after this many epochs without a lower training loss.
    #[serde(default = "default_patience")]
    pub patience: Option<usize>,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-5
}
fn default_epochs() -> usize {
    40
}
fn default_batch() -> usize {
    32
}
fn default_patience() -> Option<usize> {
    Some(10)
}

impl OptimizerConfig {
    pub fn with_lr(lr: f64) -> Self {
        OptimizerConfig {
            lr,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            patience: default_patience(),
        }
    }

    /// Short-term phase defaults.
    pub fn short_default() -> Self {
        Self::with_lr(0.01)
    }

    /// Consolidation phase defaults.
    pub fn long_default() -> Self {
        Self::with_lr(0.1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::field("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::field("momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::field("weight_decay", format!("must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::field("batch_size", "must be at least 1"));
        }
        if self.patience == Some(0) {
            return Err(Error::field("patience", "must be at least 1"));
        }
        Ok(())
    }
}

/// `v ← μ·v + g + λ·p; p ← p − η·v`
pub fn sgd_step<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, velocity: &mut Tensor<T>, cfg: &OptimizerConfig) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::mismatch("sgd_step", param.shape(), grad.shape()));
    }
    let (mu, wd, lr) = (T::from_f64(cfg.momentum), T::from_f64(cfg.weight_decay), T::from_f64(cfg.lr));
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = mu * *v + g + wd * *p;
        *p = *p - lr * *v;
    }
    Ok(())
}

/// Momentum buffers for one parameter list.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    cfg: OptimizerConfig,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(cfg: OptimizerConfig, params: &[&mut Tensor<T>]) -> Self {
        Sgd {
            cfg,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::invalid(format!(
                "optimizer holds {} buffers, got {} parameters and {} gradients",
                self.velocity.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            sgd_step(p, g, v, &self.cfg)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Short,
    Consolidate,
    /// Plain training of a reference network.
    Baseline,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Short => "short",
            Phase::Consolidate => "consolidate",
            Phase::Baseline => "baseline",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based task number.
    pub task: usize,
    /// 1-based epoch within the phase.
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub train_acc: f64,
    /// Test accuracy per evaluated task, in task order.
    pub eval_acc: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn phase(&self, task: usize, phase: Phase) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.task == task && r.phase == phase)
    }
}

/// Which classes compete when scoring a task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalScope {
    /// Argmax over every class learned so far.
    #[default]
    ClassIncremental,
    /// Argmax within the task's own classes.
    TaskAware,
}

impl EvalScope {
    fn range(self, task: &TaskDataset, head: usize) -> Range<usize> {
        match self {
            EvalScope::ClassIncremental => 0..head,
            EvalScope::TaskAware => task.global_classes(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub short: OptimizerConfig,
    pub long: OptimizerConfig,
    #[serde(default)]
    pub consolidation: ConsolidationConfig,
    #[serde(default)]
    pub eval_scope: EvalScope,
    /// Record per-epoch test accuracy.
    #[serde(default = "yes")]
    pub curves: bool,
}

fn yes() -> bool {
    true
}

impl RunConfig {
    pub fn new(model: ModelConfig) -> Self {
        RunConfig {
            model,
            short: OptimizerConfig::short_default(),
            long: OptimizerConfig::long_default(),
            consolidation: ConsolidationConfig::default(),
            eval_scope: EvalScope::ClassIncremental,
            curves: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.backbone.validate()?;
        self.short.validate().map_err(|e| e.within("short"))?;
        self.long.validate().map_err(|e| e.within("long"))?;
        self.consolidation.validate().map_err(|e| e.within("consolidation"))
    }

    /// Same settings with every phase capped at `epochs`.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.short.epochs = epochs;
        self.long.epochs = epochs;
        self
    }
}

/// Shuffle stream of one phase of one task.
pub fn shuffle_stream(seed: u64, phase: Phase, task: usize) -> Rng {
    rng::stream(seed, &[rng::tag("shuffle"), rng::tag(phase.name()), task as u64])
}

/// Fraction of `rows` whose logits argmax (within `range`) hits the label.
fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize], range: Range<usize>) -> Result<usize> {
    let pred = predict_rows(logits, range)?;
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count())
}

/// Test (or train) accuracy of a plain network on a task.
pub fn evaluate_network<T: Scalar>(net: &NetworkParams<T>, task: &TaskDataset, which: Which, range: Range<usize>) -> Result<f64> {
    evaluate_with(task, which, range, |x| net.logits(x))
}

fn evaluate_with<T: Scalar>(
    task: &TaskDataset,
    which: Which,
    range: Range<usize>,
    logits: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<f64> {
    let n = task.split(which).len();
    if n == 0 {
        return Err(Error::invalid(format!("task `{}` has no examples to evaluate", task.name)));
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = task.batch::<T>(which, chunk)?;
        correct += count_correct(&logits(&x)?, &y, range.clone())?;
    }
    Ok(correct as f64 / n as f64)
}

/// Gradients of `nodes`, zero where none reached.
fn grads_of<T: Scalar>(g: &Graph<T>, nodes: &[NodeId]) -> Vec<Tensor<T>> {
    nodes
        .iter()
        .map(|&n| g.grad(n).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(n).to_vec())))
        .collect()
}

struct EpochLoop<'a> {
    phase: Phase,
    task: usize,
    opt: &'a OptimizerConfig,
    rng: Rng,
    curves: bool,
}

impl EpochLoop<'_> {
    /// Runs up to `opt.epochs` epochs of minibatch steps. `step` returns the
    /// batch-mean loss and the number of correct predictions.
    fn run<S>(
        mut self,
        n: usize,
        state: &mut S,
        log: &mut TrainLog,
        mut step: impl FnMut(&mut S, &[usize]) -> Result<(f64, usize)>,
        eval: impl Fn(&S) -> Result<Vec<f64>>,
    ) -> Result<()> {
        if n == 0 {
            return Err(Error::invalid("cannot train on an empty dataset"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        let mut stale = 0;
        for epoch in 1..=self.opt.epochs {
            order.shuffle(&mut self.rng);
            let mut loss_sum = 0.0;
            let mut correct = 0;
            for batch in order.chunks(self.opt.batch_size) {
                let diverged = |loss| Error::Divergence {
                    phase: self.phase.name(),
                    task: self.task,
                    epoch,
                    loss,
                };
                let (loss, c) = match step(state, batch) {
                    Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                    other => other?,
                };
                if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                    return Err(diverged(loss));
                }
                loss_sum += loss * batch.len() as f64;
                correct += c;
            }
            let loss = loss_sum / n as f64;
            log.records.push(EpochRecord {
                task: self.task,
                epoch,
                phase: self.phase,
                loss,
                train_acc: correct as f64 / n as f64,
                eval_acc: if self.curves { eval(state)? } else { Vec::new() },
            });
            if !best.is_finite() || loss < best - 1e-4 * best.abs() {
                best = loss;
                stale = 0;
            } else {
                stale += 1;
                if self.opt.patience.is_some_and(|p| stale >= p) {
                    break;
                }
            }
        }
        Ok(())
    }
}

/// Trains the short-term network and its links on the current task with
/// hard-label cross-entropy. The long-term network is read but never updated.
pub fn train_short_phase<T: Scalar>(
    state: &mut CmnState<T>,
    task: &TaskDataset,
    opt: &OptimizerConfig,
    seed: u64,
    curves: bool,
    log: &mut TrainLog,
) -> Result<()> {
    if state.phase != crate::model::Phase::Short {
        return Err(Error::Phase("train_short_phase needs an active short-term network".into()));
    }
    let classes = state.current_classes()?;
    if classes != task.global_classes() {
        return Err(Error::invalid(format!(
            "task `{}` covers classes {:?}, the state expects {classes:?}",
            task.name,
            task.global_classes()
        )));
    }
    let k = state.task_index;
    let mut sgd = Sgd::new(*opt, &state.short_trainables_mut()?);
    let offset = classes.start;
    // The short-term head only spans the current task, so score with local labels.
    let local_task = TaskDataset { offset: 0, ..task.clone() };
    let epoch_loop = EpochLoop {
        phase: Phase::Short,
        task: k,
        opt,
        rng: shuffle_stream(seed, Phase::Short, k - 1),
        curves,
    };
    epoch_loop.run(
        task.train.len(),
        state,
        log,
        |state, idx| {
            let (x, y) = task.batch::<T>(Which::Train, idx)?;
            let local: Vec<usize> = y.iter().map(|l| l - offset).collect();
            let mut g = Graph::new();
            let xi = g.constant(x);
            let (logits, nodes) = state.short_forward_graph(&mut g, xi, true)?;
            let loss = hard_cross_entropy(&mut g, logits, &local)?;
            let correct = count_correct(g.value(logits), &local, 0..classes.len())?;
            let value = g.value(loss).item()?.to_f64();
            g.backward(loss)?;
            sgd.step(state.short_trainables_mut()?, &grads_of(&g, &nodes))?;
            Ok((value, correct))
        },
        |state| Ok(vec![evaluate_with(&local_task, Which::Test, 0..classes.len(), |x| state.forward_short(x))?]),
    )
}

/// Distils the frozen snapshot and the short-term network into the expanded
/// long-term network using the current task's training data only.
#[allow(clippy::too_many_arguments)]
pub fn consolidate_phase<T: Scalar>(
    state: &mut CmnState<T>,
    task: &TaskDataset,
    seen: &[TaskDataset],
    opt: &OptimizerConfig,
    cons: &ConsolidationConfig,
    scope: EvalScope,
    seed: u64,
    curves: bool,
    log: &mut TrainLog,
) -> Result<()> {
    if state.phase != crate::model::Phase::Consolidating {
        return Err(Error::Phase("consolidate_phase needs an expanded long-term network".into()));
    }
    cons.validate()?;
    let snapshot = state
        .snapshot
        .as_ref()
        .ok_or_else(|| Error::Phase("no long-term snapshot".into()))?;
    // Teacher outputs are fixed for the whole phase.
    let (x_all, _) = task.all::<T>(Which::Train)?;
    let old_all = snapshot.logits(&x_all)?;
    let short_all = state.forward_short(&x_all)?;
    let k = state.task_index;
    let (n_old, n_new) = (old_all.shape()[1], short_all.shape()[1]);
    let gather = |t: &Tensor<T>, cols: usize, idx: &[usize]| -> Result<Tensor<T>> {
        let mut d = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            d.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
        }
        Tensor::new(vec![idx.len(), cols], d)
    };
    let mut sgd = Sgd::new(*opt, &state.long_mut()?.tensors_mut());
    let epoch_loop = EpochLoop {
        phase: Phase::Consolidate,
        task: k,
        opt,
        rng: shuffle_stream(seed, Phase::Consolidate, k - 1),
        curves,
    };
    epoch_loop.run(
        task.train.len(),
        state,
        log,
        |state, idx| {
            let (x, y) = task.batch::<T>(Which::Train, idx)?;
            let mut g = Graph::new();
            let xi = g.constant(x);
            let (logits, nodes) = state.long_forward_graph(&mut g, xi, true)?;
            let old = g.constant(gather(&old_all, n_old, idx)?);
            let short = g.constant(gather(&short_all, n_new, idx)?);
            let parts = loss_total(&mut g, logits, old, short, &y, cons)?;
            let width = g.shape(logits)[1];
            let correct = count_correct(g.value(logits), &y, 0..width)?;
            let value = g.value(parts.total).item()?.to_f64();
            g.backward(parts.total)?;
            sgd.step(state.long_mut()?.tensors_mut(), &grads_of(&g, &nodes))?;
            Ok((value, correct))
        },
        |state| {
            let long = state.long_net()?;
            seen.iter()
                .map(|t| evaluate_network(long, t, Which::Test, scope.range(t, long.head_dim())))
                .collect()
        },
    )
}

/// Hard-label training of a plain network whose head covers global classes
/// `head_offset..`. Used for the reference learners.
#[allow(clippy::too_many_arguments)]
pub fn train_plain<T: Scalar>(
    net: &mut NetworkParams<T>,
    task: &TaskDataset,
    head_offset: usize,
    opt: &OptimizerConfig,
    rng: Rng,
    task_number: usize,
    curves: bool,
    log: &mut TrainLog,
) -> Result<()> {
    let width = net.head_dim();
    if task.global_classes().start < head_offset || task.global_classes().end > head_offset + width {
        return Err(Error::invalid(format!(
            "head covering classes {head_offset}..{} cannot learn task `{}`",
            head_offset + width,
            task.name
        )));
    }
    let range = task.global_classes().start - head_offset..task.global_classes().end - head_offset;
    let shifted = TaskDataset {
        offset: task.offset - head_offset,
        ..task.clone()
    };
    let mut sgd = Sgd::new(*opt, &net.tensors_mut());
    let epoch_loop = EpochLoop {
        phase: Phase::Baseline,
        task: task_number,
        opt,
        rng,
        curves,
    };
    epoch_loop.run(
        task.train.len(),
        net,
        log,
        |net, idx| {
            let (x, y) = task.batch::<T>(Which::Train, idx)?;
            let local: Vec<usize> = y.iter().map(|l| l - head_offset).collect();
            let mut g = Graph::new();
            let xi = g.constant(x);
            let bound = net.bind(&mut g, true);
            let (logits, _) = forward_plain(&mut g, &net.spec, &bound, xi)?;
            let loss = hard_cross_entropy(&mut g, logits, &local)?;
            let correct = count_correct(g.value(logits), &local, 0..width)?;
            let value = g.value(loss).item()?.to_f64();
            g.backward(loss)?;
            sgd.step(net.tensors_mut(), &grads_of(&g, &bound.nodes()))?;
            Ok((value, correct))
        },
        |net| Ok(vec![evaluate_network(net, &shifted, Which::Test, range.clone())?]),
    )
}

/// Digest of a frozen network before and after a phase.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeCheck {
    pub task: usize,
    pub phase: Phase,
    pub network: String,
    pub before: String,
    pub after: String,
}

impl FreezeCheck {
    pub fn held(&self) -> bool {
        self.before == self.after
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput<T> {
    pub state: CmnState<T>,
    pub matrix: AccuracyMatrix,
    pub log: TrainLog,
    pub params: ParamReport,
    /// Largest per-task training set over the short-phase batch size.
    pub iteration_time: Ratio<u64>,
    pub freeze_checks: Vec<FreezeCheck>,
}

fn digest_of<T: Scalar>(net: Option<&NetworkParams<T>>) -> String {
    net.map(param_digest).unwrap_or_default()
}

/// The full learn-then-consolidate loop. Row `k` of the matrix holds the
/// long-term network's test accuracy on tasks `≤ k` after task `k`; entry
/// `(k−1, k)` scores task `k` on the long-term network from before task `k`
/// with the head grown as it is about to be.
pub fn run_sequence<T: Scalar>(tasks: &TaskSequence, cfg: &RunConfig, seed: u64) -> Result<RunOutput<T>> {
    cfg.validate()?;
    let mut state = CmnState::<T>::new(cfg.model.clone())?;
    let mut matrix = AccuracyMatrix::new(tasks.len())?;
    let mut log = TrainLog::default();
    let mut checks = Vec::new();
    let scope = cfg.eval_scope;
    for (k, task) in tasks.tasks.iter().enumerate() {
        if k > 0 {
            let preview = state.preview_expanded(task.classes, seed)?;
            let range = scope.range(task, preview.head_dim());
            matrix.set(k - 1, k, evaluate_network(&preview, task, Which::Test, range)?)?;
        }
        state.begin_task(task.classes, seed)?;

        let long_before = digest_of(state.long.as_ref());
        train_short_phase(&mut state, task, &cfg.short, seed, cfg.curves, &mut log)?;
        checks.push(FreezeCheck {
            task: k + 1,
            phase: Phase::Short,
            network: "long".into(),
            before: long_before,
            after: digest_of(state.long.as_ref()),
        });

        if k == 0 {
            state.promote_first_task()?;
        } else {
            state.expand_long_head(seed)?;
            let short_before = digest_of(state.short.as_ref());
            let links_before = param_digest(state.links.as_slice());
            let snap_before = digest_of(state.snapshot.as_ref());
            consolidate_phase(
                &mut state,
                task,
                &tasks.tasks[..=k],
                &cfg.long,
                &cfg.consolidation,
                scope,
                seed,
                cfg.curves,
                &mut log,
            )?;
            checks.push(FreezeCheck {
                task: k + 1,
                phase: Phase::Consolidate,
                network: "short".into(),
                before: short_before,
                after: digest_of(state.short.as_ref()),
            });
            checks.push(FreezeCheck {
                task: k + 1,
                phase: Phase::Consolidate,
                network: "links".into(),
                before: links_before,
                after: param_digest(state.links.as_slice()),
            });
            checks.push(FreezeCheck {
                task: k + 1,
                phase: Phase::Consolidate,
                network: "snapshot".into(),
                before: snap_before,
                after: digest_of(state.snapshot.as_ref()),
            });
            state.finish_consolidation()?;
        }

        let long = state.long_net()?;
        for (j, seen) in tasks.tasks[..=k].iter().enumerate() {
            let range = scope.range(seen, long.head_dim());
            matrix.set(k, j, evaluate_network(long, seen, Which::Test, range)?)?;
        }
    }
    let largest = tasks.tasks.iter().map(|t| t.train.len()).max().unwrap_or(0);
    Ok(RunOutput {
        params: ParamReport::for_state(&state),
        iteration_time: iteration_time(largest as u64, cfg.short.batch_size as u64)?,
        state,
        matrix,
        log,
        freeze_checks: checks,
    })
}

/// Scope of a task under an evaluation mode, for callers holding a state.
pub fn scope_for(scope: EvalScope, task: usize) -> Scope {
    match scope {
        EvalScope::ClassIncremental => Scope::All,
        EvalScope::TaskAware => Scope::Task(task),
    }
}
