//! Lifecycle of the paired networks across a task sequence.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{init_params, InitScheme, NetworkParams, NetworkSpec, Parameters};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transfer::{transfer_forward, BoundLink, GateEmbedding, LongSource, TransferLink, TransferStrategy};

/// Architecture shared by both networks plus the transfer setup. The backbone's
/// head size is ignored; heads are sized from the tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: NetworkSpec,
    #[serde(default)]
    pub strategy: TransferStrategy,
    #[serde(default)]
    pub embedding: GateEmbedding,
    #[serde(default = "default_init")]
    pub init: InitScheme,
}

fn default_init() -> InitScheme {
    InitScheme::FanInUniform
}

impl ModelConfig {
    pub fn new(backbone: NetworkSpec) -> Self {
        ModelConfig {
            backbone,
            strategy: TransferStrategy::Cell,
            embedding: GateEmbedding::Full,
            init: InitScheme::FanInUniform,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Between tasks.
    Idle,
    /// A short-term network is learning the current task.
    Short,
    /// The long-term network is absorbing the current task.
    Consolidating,
}

/// Which logits take part in a prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scope", content = "task")]
pub enum Scope {
    /// Argmax over the whole long-term head.
    All,
    /// Argmax restricted to one task's classes (0-based task index).
    Task(usize),
}

#[derive(Clone, Debug)]
pub struct CmnState<T> {
    pub config: ModelConfig,
    pub long: Option<NetworkParams<T>>,
    pub short: Option<NetworkParams<T>>,
    pub links: Vec<TransferLink<T>>,
    /// Long-term network as it was before the current consolidation.
    pub snapshot: Option<NetworkParams<T>>,
    /// Number of tasks begun so far.
    pub task_index: usize,
    pub class_offsets: Vec<Range<usize>>,
    pub phase: Phase,
}

impl<T: Scalar> CmnState<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.backbone.validate()?;
        Ok(CmnState {
            config,
            long: None,
            short: None,
            links: Vec::new(),
            snapshot: None,
            task_index: 0,
            class_offsets: Vec::new(),
            phase: Phase::Idle,
        })
    }

    fn expect(&self, phase: Phase, op: &str) -> Result<()> {
        if self.phase != phase {
            return Err(Error::Phase(format!("{op} needs phase {phase:?}, state is {:?}", self.phase)));
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.class_offsets.last().map_or(0, |r| r.end)
    }

    /// Classes of the task currently being learned.
    pub fn current_classes(&self) -> Result<Range<usize>> {
        self.class_offsets
            .last()
            .cloned()
            .ok_or_else(|| Error::Phase("no task has begun".into()))
    }

    /// Fresh short-term network and transfer links for a task with `classes`
    /// classes. The long-term network, if any, stays frozen until consolidation.
    pub fn begin_task(&mut self, classes: usize, seed: u64) -> Result<()> {
        self.expect(Phase::Idle, "begin_task")?;
        if classes == 0 {
            return Err(Error::invalid("a task needs at least one class"));
        }
        let k = self.task_index as u64;
        let spec = self.config.backbone.with_head(classes);
        let short = init_params(&spec, self.config.init, rng::derive(seed, &[rng::tag("short"), k]))?;
        self.links = match &self.long {
            Some(long) => TransferLink::for_networks(
                self.config.strategy,
                &long.spec,
                &short.spec,
                self.config.embedding,
                &mut rng::stream(seed, &[rng::tag("cells"), k]),
            )?,
            None => Vec::new(),
        };
        self.short = Some(short);
        let start = self.total_classes();
        self.class_offsets.push(start..start + classes);
        self.task_index += 1;
        self.phase = Phase::Short;
        Ok(())
    }

    fn short_net(&self) -> Result<&NetworkParams<T>> {
        self.short
            .as_ref()
            .ok_or_else(|| Error::Phase("no active short-term network".into()))
    }

    pub fn long_net(&self) -> Result<&NetworkParams<T>> {
        self.long
            .as_ref()
            .ok_or_else(|| Error::Phase("no long-term network yet".into()))
    }

    /// Builds the short-term forward pass on `x`. Returns the logits and the
    /// node ids of the short-term network followed by the link parameters, in
    /// [`CmnState::short_trainables_mut`] order.
    pub fn short_forward_graph(&self, g: &mut Graph<T>, x: NodeId, trainable: bool) -> Result<(NodeId, Vec<NodeId>)> {
        let short = self.short_net()?;
        // While consolidating, the long-term slot is being retrained; the
        // short-term network keeps reading the memory it was trained with.
        let memory = match self.phase {
            Phase::Consolidating => self.snapshot.as_ref(),
            _ => self.long.as_ref(),
        };
        let long_bound = memory.map(|l| l.bind(g, false));
        let bound = short.bind(g, trainable);
        let links: Vec<BoundLink> = self.links.iter().map(|l| l.bind(g, trainable)).collect();
        let source = memory
            .zip(long_bound.as_ref())
            .map(|(spec, bound)| LongSource { spec: &spec.spec, bound });
        let (logits, _) = transfer_forward(g, &short.spec, &bound, source, &links, x, false)?;
        let mut nodes = bound.nodes();
        nodes.extend(links.iter().flat_map(|l| l.nodes()));
        Ok((logits, nodes))
    }

    pub fn short_trainables_mut(&mut self) -> Result<Vec<&mut Tensor<T>>> {
        let short = self
            .short
            .as_mut()
            .ok_or_else(|| Error::Phase("no active short-term network".into()))?;
        let mut out = short.tensors_mut();
        out.extend(self.links.tensors_mut());
        Ok(out)
    }

    /// Short-term logits for a batch, without tracking.
    pub fn forward_short(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let (logits, _) = self.short_forward_graph(&mut g, xi, false)?;
        Ok(g.value(logits).clone())
    }

    /// Long-term forward pass; returns logits and parameter node ids.
    pub fn long_forward_graph(&self, g: &mut Graph<T>, x: NodeId, trainable: bool) -> Result<(NodeId, Vec<NodeId>)> {
        let long = self.long_net()?;
        let bound = long.bind(g, trainable);
        let (logits, _) = crate::nn::forward_plain(g, &long.spec, &bound, x)?;
        Ok((logits, bound.nodes()))
    }

    /// Copies the first task's short-term network into the long-term slot.
    pub fn promote_first_task(&mut self) -> Result<()> {
        self.expect(Phase::Short, "promote_first_task")?;
        if self.task_index != 1 || self.long.is_some() {
            return Err(Error::Phase(format!(
                "promote_first_task applies to the first task only, this is task {}",
                self.task_index
            )));
        }
        self.long = Some(self.short_net()?.clone());
        self.phase = Phase::Idle;
        Ok(())
    }

    /// Snapshots the long-term network and grows its head by the current
    /// task's classes.
    pub fn expand_long_head(&mut self, seed: u64) -> Result<()> {
        self.expect(Phase::Short, "expand_long_head")?;
        let classes = self.current_classes()?.len();
        let k = (self.task_index - 1) as u64;
        let long = self
            .long
            .as_mut()
            .ok_or_else(|| Error::Phase("no long-term network to expand".into()))?;
        self.snapshot = Some(long.clone());
        long.expand_head(classes, &mut rng::stream(seed, &[rng::tag("head"), k]))?;
        self.phase = Phase::Consolidating;
        Ok(())
    }

    /// The long-term network as it would look after [`CmnState::expand_long_head`]
    /// for a task with `classes` classes, without touching the state.
    pub fn preview_expanded(&self, classes: usize, seed: u64) -> Result<NetworkParams<T>> {
        let mut long = self.long_net()?.clone();
        long.expand_head(classes, &mut rng::stream(seed, &[rng::tag("head"), self.task_index as u64]))?;
        Ok(long)
    }

    pub fn finish_consolidation(&mut self) -> Result<()> {
        self.expect(Phase::Consolidating, "finish_consolidation")?;
        self.snapshot = None;
        self.phase = Phase::Idle;
        Ok(())
    }

    pub fn long_mut(&mut self) -> Result<&mut NetworkParams<T>> {
        self.long
            .as_mut()
            .ok_or_else(|| Error::Phase("no long-term network yet".into()))
    }

    /// Predicted global classes for a batch from the long-term network.
    pub fn predict(&self, x: &Tensor<T>, scope: Scope) -> Result<Vec<usize>> {
        let logits = self.long_net()?.logits(x)?;
        let range = self.scope_range(scope)?;
        predict_rows(&logits, range)
    }

    pub fn scope_range(&self, scope: Scope) -> Result<Range<usize>> {
        match scope {
            Scope::All => Ok(0..self.long_net()?.head_dim()),
            Scope::Task(k) => self
                .class_offsets
                .get(k)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("unknown task {k}"))),
        }
    }
}

/// Row-wise argmax of `[B × n]` logits restricted to `range`; ties go to the
/// lowest index.
pub fn predict_rows<T: Scalar>(logits: &Tensor<T>, range: Range<usize>) -> Result<Vec<usize>> {
    let shape = logits.shape();
    if shape.len() != 2 || range.is_empty() || range.end > shape[1] {
        return Err(Error::invalid(format!(
            "class range {range:?} does not fit logits of shape {shape:?}"
        )));
    }
    Ok(logits
        .data()
        .chunks(shape[1])
        .map(|row| argmax(&row[range.clone()]) + range.start)
        .collect())
}

pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// SHA-256 over tensor names, shapes and little-endian values.
pub fn param_digest<T: Scalar, P: Parameters<T> + ?Sized>(params: &P) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for (name, t) in params.named_tensors() {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        buf.clear();
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        h.update(&buf);
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::count_params;

    fn config() -> ModelConfig {
        ModelConfig::new(NetworkSpec::tiny_mlp(4, 5, 1))
    }

    fn x(rows: usize) -> Tensor<f64> {
        let data: Vec<f64> = (0..rows * 4).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        Tensor::new(vec![rows, 4], data).unwrap()
    }

    fn first_task() -> CmnState<f64> {
        let mut s = CmnState::new(config()).unwrap();
        s.begin_task(2, 7).unwrap();
        s.promote_first_task().unwrap();
        s
    }

    #[test]
    fn first_task_has_no_cells_or_long_network() {
        let mut s = CmnState::<f64>::new(config()).unwrap();
        s.begin_task(2, 7).unwrap();
        assert_eq!(s.short.as_ref().unwrap().head_dim(), 2);
        assert!(s.links.is_empty());
        assert!(s.long.is_none());
        assert!(s.begin_task(2, 7).is_err());
    }

    #[test]
    fn second_task_creates_cells_and_keeps_long_head() {
        let mut s = first_task();
        s.begin_task(3, 7).unwrap();
        assert_eq!(s.links.len(), 2);
        assert_eq!(s.long_net().unwrap().head_dim(), 2);
        assert_eq!(s.short.as_ref().unwrap().head_dim(), 3);
        assert_eq!(s.class_offsets, vec![0..2, 2..5]);
    }

    #[test]
    fn same_seed_same_short_network() {
        let mut a = CmnState::<f64>::new(config()).unwrap();
        let mut b = CmnState::<f64>::new(config()).unwrap();
        a.begin_task(2, 99).unwrap();
        b.begin_task(2, 99).unwrap();
        assert_eq!(param_digest(a.short.as_ref().unwrap()), param_digest(b.short.as_ref().unwrap()));
        let mut c = CmnState::<f64>::new(config()).unwrap();
        c.begin_task(2, 100).unwrap();
        assert_ne!(param_digest(a.short.as_ref().unwrap()), param_digest(c.short.as_ref().unwrap()));
    }

    #[test]
    fn forward_short_errors_without_network_and_zero_net_gives_zero() {
        let s = CmnState::<f64>::new(config()).unwrap();
        assert!(s.forward_short(&x(2)).is_err());

        let mut cfg = config();
        cfg.init = InitScheme::Constant(0.0);
        let mut s = CmnState::<f64>::new(cfg).unwrap();
        s.begin_task(2, 1).unwrap();
        assert!(s.forward_short(&x(3)).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn promotion_copies_the_short_network() {
        let s = first_task();
        let xs = x(6);
        let long = s.long_net().unwrap();
        assert_eq!(long.logits(&xs).unwrap(), s.forward_short(&xs).unwrap());
        assert_eq!(long.head_dim(), 2);
        assert_eq!(count_params(long), count_params(s.short.as_ref().unwrap()));

        let mut s2 = first_task();
        s2.begin_task(2, 1).unwrap();
        assert!(s2.promote_first_task().is_err());
    }

    #[test]
    fn head_expansion_keeps_old_rows() {
        let mut s = first_task();
        let before = s.long_net().unwrap().clone();
        s.begin_task(3, 5).unwrap();
        s.expand_long_head(5).unwrap();
        let after = s.long_net().unwrap();
        assert_eq!(after.head_dim(), 5);
        assert_eq!(&after.head.weight.data()[..10], before.head.weight.data());
        assert_eq!(&after.head.bias.data()[..2], before.head.bias.data());
        assert_eq!(count_params(after) - count_params(&before), 3 * (5 + 1));
        assert_eq!(s.snapshot.as_ref().unwrap(), &before);
        assert_eq!(s.phase, Phase::Consolidating);
        s.finish_consolidation().unwrap();
        assert!(s.snapshot.is_none());
    }

    #[test]
    fn preview_matches_real_expansion() {
        let mut s = first_task();
        let preview = s.preview_expanded(2, 5).unwrap();
        s.begin_task(2, 5).unwrap();
        s.expand_long_head(5).unwrap();
        assert_eq!(&preview, s.long_net().unwrap());
    }

    #[test]
    fn prediction_rules() {
        let logits = Tensor::<f64>::from_f64(vec![2, 3], &[0.1, 0.9, 0.3, 0.5, 0.5, 0.2]).unwrap();
        assert_eq!(predict_rows(&logits, 0..3).unwrap(), vec![1, 0]);
        assert_eq!(predict_rows(&logits, 2..3).unwrap(), vec![2, 2]);
        assert!(predict_rows(&logits, 2..4).is_err());

        let s = first_task();
        assert!(s.predict(&x(2), Scope::Task(3)).is_err());
        assert_eq!(s.predict(&x(2), Scope::All).unwrap().len(), 2);
    }

    #[test]
    fn digest_tracks_every_value() {
        let s = first_task();
        let mut long = s.long_net().unwrap().clone();
        let d = param_digest(&long);
        assert_eq!(d, param_digest(s.long_net().unwrap()));
        long.layers[1].bias.data_mut()[0] += 1e-12;
        assert_ne!(d, param_digest(&long));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn task_scope_ignores_other_logits(row in proptest::collection::vec(-5.0f64..5.0, 5), noise in -100.0f64..100.0) {
                let a = Tensor::new(vec![1, 5], row.clone()).unwrap();
                let mut changed = row.clone();
                changed[0] = noise;
                changed[4] = -noise;
                let b = Tensor::new(vec![1, 5], changed).unwrap();
                prop_assert_eq!(predict_rows(&a, 1..4).unwrap(), predict_rows(&b, 1..4).unwrap());
            }
        }
    }
}
