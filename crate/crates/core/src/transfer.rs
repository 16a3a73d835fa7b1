//! Gated transfer from the long-term network into the short-term network.
//!
//! Per hidden layer the long-term feature `ȟ` passes through channel attention
//! and a learned projection (memory processing), a sigmoid gate computed from
//! both networks' pooled features decides how much of it to admit (recall
//! gate), and the gated result is added to the short-term feature `h̃` (memory
//! integration) before the next short-term layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{
    self, check_input, eca_forward, fan_in_uniform, BoundNetwork, EcaParams, NetworkSpec, Parameters,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How the gate embeddings map pooled features into the gate space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateEmbedding {
    /// Full `[gate × channels]` matrices.
    #[default]
    Full,
    /// One scalar per channel; needs equal long and short channel counts.
    Diagonal,
}

/// How long-term features reach the short-term network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferStrategy {
    /// Attention, projection, recall gate and additive integration.
    #[default]
    Cell,
    /// No transfer at all.
    None,
    /// A lateral linear adapter added to the short-term feature.
    Matrix,
    /// The raw long-term feature added to the short-term feature.
    Direct,
}

impl TransferStrategy {
    pub const ALL: [TransferStrategy; 4] = [
        TransferStrategy::Cell,
        TransferStrategy::None,
        TransferStrategy::Matrix,
        TransferStrategy::Direct,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransferStrategy::Cell => "cell",
            TransferStrategy::None => "none",
            TransferStrategy::Matrix => "matrix",
            TransferStrategy::Direct => "direct",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown transfer strategy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferCell<T> {
    /// Attention over the long-term feature's channels.
    pub eca: EcaParams<T>,
    /// `[short channels × long channels]`
    pub projection: Tensor<T>,
    /// Gate embedding of the pooled long-term feature.
    pub gate_long: Tensor<T>,
    /// Gate embedding of the pooled short-term feature.
    pub gate_short: Tensor<T>,
    pub gate_bias: Tensor<T>,
    pub embedding: GateEmbedding,
}

impl<T: Scalar> TransferCell<T> {
    /// Gate embeddings start at 1 and the gate bias at 0; attention kernel and
    /// projection are fan-in uniform.
    pub fn new(long_channels: usize, short_channels: usize, embedding: GateEmbedding, rng: &mut Rng) -> Result<Self> {
        if long_channels == 0 || short_channels == 0 {
            return Err(Error::invalid("transfer cell needs positive channel counts"));
        }
        let gate = short_channels;
        let (long_shape, short_shape) = match embedding {
            GateEmbedding::Full => (vec![gate, long_channels], vec![gate, short_channels]),
            GateEmbedding::Diagonal => {
                if long_channels != short_channels {
                    return Err(Error::invalid(format!(
                        "diagonal gate embedding needs equal channels, got {long_channels} and {short_channels}"
                    )));
                }
                (vec![gate], vec![gate])
            }
        };
        let eca = EcaParams::init(long_channels, rng);
        let projection = Tensor::from_parts(
            vec![short_channels, long_channels],
            fan_in_uniform(short_channels * long_channels, long_channels, rng),
        );
        Ok(TransferCell {
            eca,
            projection,
            gate_long: Tensor::full(long_shape, T::ONE),
            gate_short: Tensor::full(short_shape, T::ONE),
            gate_bias: Tensor::zeros(vec![gate]),
            embedding,
        })
    }

    pub fn long_channels(&self) -> usize {
        self.projection.shape()[1]
    }

    pub fn short_channels(&self) -> usize {
        self.projection.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundCell {
        BoundCell {
            eca: g.leaf(self.eca.kernel.clone(), trainable),
            projection: g.leaf(self.projection.clone(), trainable),
            gate_long: g.leaf(self.gate_long.clone(), trainable),
            gate_short: g.leaf(self.gate_short.clone(), trainable),
            gate_bias: g.leaf(self.gate_bias.clone(), trainable),
            embedding: self.embedding,
        }
    }

    /// Eager memory processing of a batch of long-term features.
    pub fn process(&self, h_check: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let cell = self.bind(&mut g, false);
        let h = g.constant(h_check.clone());
        let out = memory_processing(&mut g, &cell, h)?;
        Ok(g.value(out).clone())
    }

    /// Eager recall gate for a batch: `[B × short channels]`.
    pub fn gate(&self, h_check: &Tensor<T>, h_tilde: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let cell = self.bind(&mut g, false);
        let a = g.constant(h_check.clone());
        let b = g.constant(h_tilde.clone());
        let out = recall_gate(&mut g, &cell, a, b)?;
        Ok(g.value(out).clone())
    }
}

impl<T: Scalar> Parameters<T> for TransferCell<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("eca".into(), &self.eca.kernel),
            ("projection".into(), &self.projection),
            ("gate_long".into(), &self.gate_long),
            ("gate_short".into(), &self.gate_short),
            ("gate_bias".into(), &self.gate_bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.eca.kernel,
            &mut self.projection,
            &mut self.gate_long,
            &mut self.gate_short,
            &mut self.gate_bias,
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundCell {
    pub eca: NodeId,
    pub projection: NodeId,
    pub gate_long: NodeId,
    pub gate_short: NodeId,
    pub gate_bias: NodeId,
    pub embedding: GateEmbedding,
}

/// `ReLU(P · eca(ȟ))`, shaped like the short-term feature.
pub fn memory_processing<T: Scalar>(g: &mut Graph<T>, cell: &BoundCell, h_check: NodeId) -> Result<NodeId> {
    let attended = eca_forward(g, cell.eca, h_check)?;
    let projected = g.channel_mix(attended, cell.projection)?;
    g.relu(projected)
}

fn embed<T: Scalar>(g: &mut Graph<T>, pooled: NodeId, e: NodeId, embedding: GateEmbedding) -> Result<NodeId> {
    match embedding {
        GateEmbedding::Full => g.channel_mix(pooled, e),
        GateEmbedding::Diagonal => g.mul_row(pooled, e),
    }
}

/// `σ(Ē·GAP(ȟ) + Ẽ·GAP(h̃) + b)`, one value per transferred channel.
pub fn recall_gate<T: Scalar>(g: &mut Graph<T>, cell: &BoundCell, h_check: NodeId, h_tilde: NodeId) -> Result<NodeId> {
    let pooled_long = g.gap(h_check)?;
    let pooled_short = g.gap(h_tilde)?;
    let a = embed(g, pooled_long, cell.gate_long, cell.embedding)?;
    let b = embed(g, pooled_short, cell.gate_short, cell.embedding)?;
    let sum = g.add(a, b)?;
    let z = g.add_row(sum, cell.gate_bias)?;
    g.sigmoid(z)
}

/// `ĥ = h̃ + g ⊗ h⃗`, with the per-channel gate broadcast over spatial axes.
pub fn memory_integration<T: Scalar>(g: &mut Graph<T>, h_tilde: NodeId, gate: NodeId, h_vec: NodeId) -> Result<NodeId> {
    let gated = g.mul_channel(h_vec, gate)?;
    g.add(h_tilde, gated)
}

/// Learned connection for one layer pair.
#[derive(Clone, Debug, PartialEq)]
pub enum TransferLink<T> {
    Cell(TransferCell<T>),
    /// `[short channels × long channels]` lateral adapter.
    Matrix(Tensor<T>),
    Direct,
}

impl<T: Scalar> TransferLink<T> {
    /// `None` for [`TransferStrategy::None`].
    pub fn new(
        strategy: TransferStrategy,
        long_channels: usize,
        short_channels: usize,
        embedding: GateEmbedding,
        rng: &mut Rng,
    ) -> Result<Option<Self>> {
        Ok(match strategy {
            TransferStrategy::None => None,
            TransferStrategy::Cell => Some(TransferLink::Cell(TransferCell::new(
                long_channels,
                short_channels,
                embedding,
                rng,
            )?)),
            TransferStrategy::Matrix => Some(TransferLink::Matrix(Tensor::from_parts(
                vec![short_channels, long_channels],
                fan_in_uniform(short_channels * long_channels, long_channels, rng),
            ))),
            TransferStrategy::Direct => Some(TransferLink::Direct),
        })
    }

    /// One link per hidden layer pair.
    pub fn for_networks(
        strategy: TransferStrategy,
        long: &NetworkSpec,
        short: &NetworkSpec,
        embedding: GateEmbedding,
        rng: &mut Rng,
    ) -> Result<Vec<Self>> {
        if long.layers.len() != short.layers.len() {
            return Err(Error::invalid(format!(
                "long-term network has {} hidden layers, short-term network {}",
                long.layers.len(),
                short.layers.len()
            )));
        }
        let mut links = Vec::new();
        for (l, s) in long.layers.iter().zip(&short.layers) {
            if let Some(link) = Self::new(strategy, l.output, s.output, embedding, rng)? {
                links.push(link);
            }
        }
        Ok(links)
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundLink {
        match self {
            TransferLink::Cell(c) => BoundLink::Cell(c.bind(g, trainable)),
            TransferLink::Matrix(p) => BoundLink::Matrix(g.leaf(p.clone(), trainable)),
            TransferLink::Direct => BoundLink::Direct,
        }
    }
}

impl<T: Scalar> Parameters<T> for TransferLink<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        match self {
            TransferLink::Cell(c) => c.named_tensors(),
            TransferLink::Matrix(p) => vec![("matrix".into(), p)],
            TransferLink::Direct => Vec::new(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            TransferLink::Cell(c) => c.tensors_mut(),
            TransferLink::Matrix(p) => vec![p],
            TransferLink::Direct => Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BoundLink {
    Cell(BoundCell),
    Matrix(NodeId),
    Direct,
}

impl BoundLink {
    /// Ids in [`Parameters::tensors`] order.
    pub fn nodes(&self) -> Vec<NodeId> {
        match *self {
            BoundLink::Cell(c) => vec![c.eca, c.projection, c.gate_long, c.gate_short, c.gate_bias],
            BoundLink::Matrix(p) => vec![p],
            BoundLink::Direct => Vec::new(),
        }
    }
}

/// Merges the long-term feature `h_check` into the short-term feature `h_tilde`.
pub fn integrate<T: Scalar>(g: &mut Graph<T>, link: &BoundLink, h_tilde: NodeId, h_check: NodeId) -> Result<NodeId> {
    let merged = match *link {
        BoundLink::Cell(ref cell) => {
            let h_vec = memory_processing(g, cell, h_check)?;
            let gate = recall_gate(g, cell, h_check, h_tilde)?;
            if g.shape(h_vec) != g.shape(h_tilde) {
                return Err(Error::mismatch("memory_integration", g.shape(h_tilde), g.shape(h_vec)));
            }
            memory_integration(g, h_tilde, gate, h_vec)?
        }
        BoundLink::Matrix(p) => {
            let lateral = g.channel_mix(h_check, p)?;
            g.add(h_tilde, lateral)?
        }
        BoundLink::Direct => g.add(h_tilde, h_check)?,
    };
    Ok(merged)
}

/// The frozen long-term network a short-term forward pass reads from.
pub struct LongSource<'a> {
    pub spec: &'a NetworkSpec,
    pub bound: &'a BoundNetwork,
}

/// Short-term forward pass with transferred long-term features.
///
/// Each hidden layer computes `h̃_l = ReLU(W_l ĥ_{l−1})` where `ĥ` is the
/// previous layer's output merged with the long-term feature of the same
/// depth. With `bypass` (or no links) this is exactly [`nn::forward_plain`].
/// Returns the logits and the merged features.
pub fn transfer_forward<T: Scalar>(
    g: &mut Graph<T>,
    short_spec: &NetworkSpec,
    short: &BoundNetwork,
    long: Option<LongSource<'_>>,
    links: &[BoundLink],
    x: NodeId,
    bypass: bool,
) -> Result<(NodeId, Vec<NodeId>)> {
    let long = match long {
        Some(l) if !bypass && !links.is_empty() => l,
        _ => return nn::forward_plain(g, short_spec, short, x),
    };
    if links.len() != short_spec.layers.len() || long.spec.layers.len() != short_spec.layers.len() {
        return Err(Error::invalid(format!(
            "{} transfer links for {} short-term and {} long-term hidden layers",
            links.len(),
            short_spec.layers.len(),
            long.spec.layers.len()
        )));
    }
    check_input(g, short_spec, x)?;
    let long_hidden = nn::forward_body(g, long.spec, long.bound, x)?;
    let mut merged = Vec::with_capacity(links.len());
    let mut h = x;
    for (i, layer) in short_spec.layers.iter().enumerate() {
        let h_tilde = nn::layer_forward(g, layer, short.layers[i], h)?;
        h = integrate(g, &links[i], h_tilde, long_hidden[i])?;
        merged.push(h);
    }
    let logits = nn::head_forward(g, short.head, h)?;
    Ok((logits, merged))
}
