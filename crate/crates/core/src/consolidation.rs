//! Distillation losses for moving a finished task into the long-term network.
//!
//! Throughout, the frozen network provides the target distribution and the new
//! long-term network is the student. Every term is a batch mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor inside the logarithm of every cross-entropy.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsolidationConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_temperature() -> f64 {
    2.0
}

fn default_beta() -> f64 {
    0.8
}

impl Default for ConsolidationConfig {
    fn default() -> Self {
        ConsolidationConfig {
            temperature: default_temperature(),
            beta: default_beta(),
        }
    }
}

impl ConsolidationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::field("temperature", format!("must be positive, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::field("beta", format!("must lie in [0, 1], got {}", self.beta)));
        }
        Ok(())
    }
}

/// `−Σ target · ln(pred + ε)` for two probability vectors.
pub fn cross_entropy_soft(target: &[f64], pred: &[f64]) -> Result<f64> {
    if target.len() != pred.len() || target.is_empty() {
        return Err(Error::mismatch("cross_entropy_soft", &[target.len()], &[pred.len()]));
    }
    for (name, d) in [("target", target), ("prediction", pred)] {
        let sum: f64 = d.iter().sum();
        if d.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("{name} is not a probability distribution (sum {sum})")));
        }
    }
    Ok(-target.iter().zip(pred).map(|(t, p)| t * (p + LOG_EPS).ln()).sum::<f64>())
}

/// Batch-mean soft cross-entropy between fixed target probabilities and
/// `softmax(student / temp)`.
pub fn soft_cross_entropy<T: Scalar>(g: &mut Graph<T>, target: NodeId, student: NodeId, temp: f64) -> Result<NodeId> {
    if g.shape(target) != g.shape(student) {
        return Err(Error::mismatch("soft_cross_entropy", g.shape(target), g.shape(student)));
    }
    let batch = g.shape(student)[0];
    let p = g.softmax(student, temp)?;
    let logp = g.ln_eps(p, LOG_EPS)?;
    let prod = g.mul(target, logp)?;
    let s = g.sum(prod)?;
    g.scale(s, -1.0 / batch as f64)
}

fn one_hot<T: Scalar>(labels: &[usize], width: usize, allowed: std::ops::Range<usize>) -> Result<Tensor<T>> {
    let mut data = vec![T::ZERO; labels.len() * width];
    for (i, &l) in labels.iter().enumerate() {
        if !allowed.contains(&l) {
            return Err(Error::LabelOutOfRange { label: l, range: allowed });
        }
        data[i * width + l] = T::ONE;
    }
    Tensor::new(vec![labels.len(), width], data)
}

/// Preservation term: the old snapshot's tempered distribution over the old
/// classes against the new network's first `old` units.
pub fn loss_dis_long<T: Scalar>(
    g: &mut Graph<T>,
    new_logits: NodeId,
    old_logits: NodeId,
    cfg: &ConsolidationConfig,
) -> Result<NodeId> {
    let (new_shape, old_shape) = (g.shape(new_logits).to_vec(), g.shape(old_logits).to_vec());
    if new_shape.len() != 2 || old_shape.len() != 2 || new_shape[0] != old_shape[0] || old_shape[1] > new_shape[1] {
        return Err(Error::mismatch("loss_dis_long", &new_shape, &old_shape));
    }
    let slice = g.slice_cols(new_logits, 0, old_shape[1])?;
    let teacher = g.softmax(old_logits, cfg.temperature)?;
    soft_cross_entropy(g, teacher, slice, cfg.temperature)
}

/// Acquisition term: hard labels over the full head mixed with the
/// short-term network's tempered distribution over the new classes (the last
/// units of the head).
pub fn loss_dis_short<T: Scalar>(
    g: &mut Graph<T>,
    new_logits: NodeId,
    short_logits: NodeId,
    labels: &[usize],
    cfg: &ConsolidationConfig,
) -> Result<NodeId> {
    let (new_shape, s_shape) = (g.shape(new_logits).to_vec(), g.shape(short_logits).to_vec());
    if new_shape.len() != 2
        || s_shape.len() != 2
        || new_shape[0] != s_shape[0]
        || s_shape[1] > new_shape[1]
        || labels.len() != new_shape[0]
    {
        return Err(Error::mismatch("loss_dis_short", &new_shape, &s_shape));
    }
    let (width, fresh) = (new_shape[1], s_shape[1]);
    let target = g.constant(one_hot(labels, width, width - fresh..width)?);
    let hard = soft_cross_entropy(g, target, new_logits, 1.0)?;
    let slice = g.slice_cols(new_logits, width - fresh, fresh)?;
    let teacher = g.softmax(short_logits, cfg.temperature)?;
    let soft = soft_cross_entropy(g, teacher, slice, cfg.temperature)?;
    let t2 = cfg.temperature * cfg.temperature;
    let a = g.scale(hard, 1.0 - cfg.beta)?;
    let b = g.scale(soft, cfg.beta * t2)?;
    g.add(a, b)
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub long: NodeId,
    pub short: NodeId,
    pub total: NodeId,
}

pub fn loss_total<T: Scalar>(
    g: &mut Graph<T>,
    new_logits: NodeId,
    old_logits: NodeId,
    short_logits: NodeId,
    labels: &[usize],
    cfg: &ConsolidationConfig,
) -> Result<LossNodes> {
    let long = loss_dis_long(g, new_logits, old_logits, cfg)?;
    let short = loss_dis_short(g, new_logits, short_logits, labels, cfg)?;
    let total = g.add(long, short)?;
    Ok(LossNodes { long, short, total })
}

/// Batch-mean cross-entropy of `logits` against integer labels.
pub fn hard_cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::mismatch("hard_cross_entropy", &shape, &[labels.len()]));
    }
    let target = g.constant(one_hot(labels, shape[1], 0..shape[1])?);
    soft_cross_entropy(g, target, logits, 1.0)
}
