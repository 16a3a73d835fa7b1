//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is topologically sorted
//! by construction and [`Graph::backward`] visits each node exactly once in
//! reverse. Leaves created with [`Graph::constant`] never receive gradients and
//! neither does anything computed only from constants; freezing a network means
//! binding its parameters as constants.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels::{self, ConvDims};
use crate::tensor::{check_finite, conv2d, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// The second operand's shape is a leading prefix of the first's.
    Leading,
    /// The second operand's shape is a trailing suffix of the first's.
    Trailing,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Conv2d {
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        dims: ConvDims,
    },
    Gap(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId, Bcast),
    Mul(NodeId, NodeId, Bcast),
    ChannelConv1d {
        x: NodeId,
        kernel: NodeId,
    },
    ChannelMix {
        x: NodeId,
        p: NodeId,
    },
    Scale(NodeId, T),
    Softmax {
        x: NodeId,
        temp: T,
    },
    LnEps {
        x: NodeId,
        eps: T,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    Sum(NodeId),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A tracked leaf: gradients flow into it.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    /// An untracked leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to `id`.
    /// `None` when the node is untracked or unreachable from the loss.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        check_finite(name, &value)?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `x[B×in] · w[out×in]ᵀ + b[out]`
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let (rows, input, output) = match (xs, ws) {
            ([r, i], [o, i2]) if i == i2 => (*r, *i, *o),
            _ => return Err(Error::mismatch("linear", xs, ws)),
        };
        if let Some(b) = b {
            if self.shape(b) != [output] {
                return Err(Error::mismatch("linear", ws, self.shape(b)));
            }
        }
        let mut data = kernels::matmul_nt(self.value(x).data(), self.value(w).data(), rows, input, output);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in data.chunks_mut(output) {
                for (v, &bv) in row.iter_mut().zip(bias) {
                    *v += bv;
                }
            }
        }
        let out = Tensor::from_parts(vec![rows, output], data);
        let inputs: Vec<NodeId> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("linear", out, Op::Linear { x, w, b }, &inputs)
    }

    /// Batched conv: `x[B×C_in×H×W]`, `k[C_out×C_in×h×w]`, optional per-channel bias.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: Option<NodeId>, pad: usize) -> Result<NodeId> {
        if self.value(x).ndim() != 4 {
            return Err(Error::mismatch("conv2d", self.shape(x), self.shape(k)));
        }
        let dims = crate::tensor::ops_conv_dims(self.shape(x), self.shape(k), pad)?;
        let mut out = conv2d(self.value(x), self.value(k), pad)?;
        if let Some(b) = b {
            if self.shape(b) != [dims.c_out] {
                return Err(Error::mismatch("conv2d", self.shape(k), self.shape(b)));
            }
            let plane = dims.out_h() * dims.out_w();
            let bias = self.value(b).data().to_vec();
            for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
                let bv = bias[i % dims.c_out];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let inputs: Vec<NodeId> = [Some(x), Some(k), b].into_iter().flatten().collect();
        self.push("conv2d", out, Op::Conv2d { x, k, b, dims }, &inputs)
    }

    /// Mean over every axis after the first two: `[B×C×…] → [B×C]`.
    pub fn gap(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::InvalidShape {
                shape,
                reason: "gap expects [B×C×…]".into(),
            });
        }
        let s: usize = shape[2..].iter().product();
        let inv = T::from_f64(1.0 / s as f64);
        let data = self
            .value(x)
            .data()
            .chunks(s)
            .map(|c| if s == 1 { c[0] } else { c.iter().copied().sum::<T>() * inv })
            .collect();
        let out = Tensor::from_parts(shape[..2].to_vec(), data);
        self.push("gap", out, Op::Gap(x), &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = crate::tensor::relu(self.value(x));
        self.push("relu", out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out = crate::tensor::sigmoid(self.value(x));
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    fn binary(&mut self, name: &'static str, a: NodeId, b: NodeId, bcast: Bcast, mul: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = match bcast {
            Bcast::Same => sa == sb,
            Bcast::Leading => sb.len() <= sa.len() && sa[..sb.len()] == *sb,
            Bcast::Trailing => sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb,
        };
        if !ok {
            return Err(Error::mismatch(name, sa, sb));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let f = |x: T, y: T| if mul { x * y } else { x + y };
        let data: Vec<T> = match bcast {
            Bcast::Same => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Leading => {
                let inner = va.len() / vb.len();
                va.chunks(inner)
                    .zip(vb)
                    .flat_map(|(c, &y)| c.iter().map(move |&x| f(x, y)))
                    .collect()
            }
            Bcast::Trailing => va
                .chunks(vb.len())
                .flat_map(|c| c.iter().zip(vb).map(|(&x, &y)| f(x, y)))
                .collect(),
        };
        let out = Tensor::from_parts(sa.to_vec(), data);
        let op = if mul { Op::Mul(a, b, bcast) } else { Op::Add(a, b, bcast) };
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, Bcast::Same, false)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, Bcast::Same, true)
    }

    /// `x + v` with `v`'s shape a leading prefix of `x`'s (a `[B×C]` gate over
    /// `[B×C×H×W]`, for instance).
    pub fn add_channel(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        self.binary("add_channel", x, v, Bcast::Leading, false)
    }

    pub fn mul_channel(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        self.binary("mul_channel", x, v, Bcast::Leading, true)
    }

    /// `x + v` with `v` repeated along the leading axes (a bias row).
    pub fn add_row(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        self.binary("add_row", x, v, Bcast::Trailing, false)
    }

    pub fn mul_row(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        self.binary("mul_row", x, v, Bcast::Trailing, true)
    }

    /// Zero-padded cross-correlation of an odd-length kernel along the channel
    /// axis of `x[B×C]`.
    pub fn channel_conv1d(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let (xs, ks) = (self.shape(x), self.shape(kernel));
        let (rows, c) = match (xs, ks) {
            ([r, c], [k]) if k % 2 == 1 => (*r, *c),
            _ => return Err(Error::mismatch("channel_conv1d", xs, ks)),
        };
        let data = kernels::channel_conv1d(self.value(x).data(), self.value(kernel).data(), rows, c);
        let out = Tensor::from_parts(vec![rows, c], data);
        self.push("channel_conv1d", out, Op::ChannelConv1d { x, kernel }, &[x, kernel])
    }

    /// Per-position channel projection: `x[B×C×…]`, `p[O×C]` → `[B×O×…]`.
    pub fn channel_mix(&mut self, x: NodeId, p: NodeId) -> Result<NodeId> {
        let (xs, ps) = (self.shape(x).to_vec(), self.shape(p));
        let (c_out, c_in) = match (xs.as_slice(), ps) {
            ([_, c, ..], [o, c2]) if c == c2 => (*o, *c),
            _ => return Err(Error::mismatch("channel_mix", &xs, ps)),
        };
        let spatial: usize = xs[2..].iter().product();
        let data = kernels::channel_mix(self.value(x).data(), self.value(p).data(), xs[0], c_in, c_out, spatial);
        let mut shape = xs;
        shape[1] = c_out;
        let out = Tensor::from_parts(shape, data);
        self.push("channel_mix", out, Op::ChannelMix { x, p }, &[x, p])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let f = T::from_f64(factor);
        let out = self.value(x).map(|v| v * f);
        self.push("scale", out, Op::Scale(x, f), &[x])
    }

    /// Row-wise `softmax(x / temp)` of a `[B×n]` matrix.
    pub fn softmax(&mut self, x: NodeId, temp: f64) -> Result<NodeId> {
        if self.value(x).ndim() != 2 {
            return Err(Error::InvalidShape {
                shape: self.shape(x).to_vec(),
                reason: "softmax expects [B×n]".into(),
            });
        }
        let out = crate::tensor::softmax_with_temperature(self.value(x), temp)?;
        self.push("softmax", out, Op::Softmax { x, temp: T::from_f64(temp) }, &[x])
    }

    /// `ln(x + eps)`; `x + eps` must be positive.
    pub fn ln_eps(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let e = T::from_f64(eps);
        if self.value(x).data().iter().any(|&v| v + e <= T::ZERO) {
            return Err(Error::invalid("ln_eps: argument not positive"));
        }
        let out = self.value(x).map(|v| (v + e).ln());
        self.push("ln_eps", out, Op::LnEps { x, eps: e }, &[x])
    }

    /// Columns `start..start+len` of a `[B×n]` matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xs = self.shape(x);
        let (rows, n) = match xs {
            [r, n] if start + len <= *n && len > 0 => (*r, *n),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "slice_cols: columns {start}..{} out of range for {xs:?}",
                    start + len
                )))
            }
        };
        let src = self.value(x).data();
        let data = (0..rows)
            .flat_map(|r| src[r * n + start..r * n + start + len].iter().copied())
            .collect();
        let out = Tensor::from_parts(vec![rows, len], data);
        self.push("slice_cols", out, Op::SliceCols { x, start }, &[x])
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Populates gradients of the scalar `loss` for every tracked node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Detached);
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &dy, &mut grads);
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::from_parts(shape, dy));
        }
        Ok(())
    }

    fn propagate(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let tracked = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut acc = |id: NodeId, delta: Vec<T>| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(g) => g.iter_mut().zip(&delta).for_each(|(a, &d)| *a += d),
                slot => *slot = Some(delta),
            }
        };
        let node = &self.nodes[i];
        let val = |id: NodeId| self.nodes[id.0].value.data();
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if tracked(a) {
                    acc(a, kernels::matmul_nt(dy, val(b), m, n, k));
                }
                if tracked(b) {
                    acc(b, kernels::matmul_tn(val(a), dy, k, m, n));
                }
            }
            Op::Linear { x, w, b } => {
                let (rows, input) = (self.shape(x)[0], self.shape(x)[1]);
                let output = self.shape(w)[0];
                if tracked(x) {
                    acc(x, kernels::matmul(dy, val(w), rows, output, input));
                }
                if tracked(w) {
                    acc(w, kernels::matmul_tn(dy, val(x), output, rows, input));
                }
                if let Some(b) = b {
                    if tracked(b) {
                        acc(b, column_sums(dy, output));
                    }
                }
            }
            Op::Conv2d { x, k, b, dims } => {
                let (dx, dk) = kernels::conv2d_backward(val(x), val(k), dy, dims, tracked(x), tracked(k));
                if tracked(x) {
                    acc(x, dx);
                }
                if tracked(k) {
                    acc(k, dk);
                }
                if let Some(b) = b {
                    if tracked(b) {
                        let plane = dims.out_h() * dims.out_w();
                        let mut db = vec![T::ZERO; dims.c_out];
                        for (j, chunk) in dy.chunks(plane).enumerate() {
                            db[j % dims.c_out] += chunk.iter().copied().sum::<T>();
                        }
                        acc(b, db);
                    }
                }
            }
            Op::Gap(x) => {
                let s: usize = self.shape(x)[2..].iter().product();
                let inv = T::from_f64(1.0 / s as f64);
                let dx = dy
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(if s == 1 { g } else { g * inv }, s))
                    .collect();
                acc(x, dx);
            }
            Op::Relu(x) => {
                let dx = dy
                    .iter()
                    .zip(val(x))
                    .map(|(&g, &v)| if v > T::ZERO { g } else { T::ZERO })
                    .collect();
                acc(x, dx);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = dy.iter().zip(y).map(|(&g, &s)| g * s * (T::ONE - s)).collect();
                acc(x, dx);
            }
            Op::Add(a, b, bcast) => {
                if tracked(a) {
                    acc(a, dy.to_vec());
                }
                if tracked(b) {
                    acc(b, reduce_broadcast(dy, val(b).len(), bcast));
                }
            }
            Op::Mul(a, b, bcast) => {
                let (va, vb) = (val(a), val(b));
                if tracked(a) {
                    let expanded = expand_broadcast(vb, va.len(), bcast);
                    acc(a, dy.iter().zip(&expanded).map(|(&g, &v)| g * v).collect());
                }
                if tracked(b) {
                    let prod: Vec<T> = dy.iter().zip(va).map(|(&g, &v)| g * v).collect();
                    acc(b, reduce_broadcast(&prod, vb.len(), bcast));
                }
            }
            Op::ChannelConv1d { x, kernel } => {
                let (rows, c) = (self.shape(x)[0], self.shape(x)[1]);
                let (dx, dk) = kernels::channel_conv1d_backward(val(x), val(kernel), dy, rows, c);
                acc(x, dx);
                acc(kernel, dk);
            }
            Op::ChannelMix { x, p } => {
                let xs = self.shape(x);
                let (batch, c_in) = (xs[0], xs[1]);
                let c_out = self.shape(p)[0];
                let spatial: usize = xs[2..].iter().product();
                let (vx, vp) = (val(x), val(p));
                if tracked(x) {
                    let mut dx = vec![T::ZERO; vx.len()];
                    for bi in 0..batch {
                        for o in 0..c_out {
                            let g = &dy[(bi * c_out + o) * spatial..(bi * c_out + o + 1) * spatial];
                            for c in 0..c_in {
                                let pv = vp[o * c_in + c];
                                let d = &mut dx[(bi * c_in + c) * spatial..(bi * c_in + c + 1) * spatial];
                                d.iter_mut().zip(g).for_each(|(d, &g)| *d += pv * g);
                            }
                        }
                    }
                    acc(x, dx);
                }
                if tracked(p) {
                    let mut dp = vec![T::ZERO; vp.len()];
                    for bi in 0..batch {
                        for o in 0..c_out {
                            let g = &dy[(bi * c_out + o) * spatial..(bi * c_out + o + 1) * spatial];
                            for c in 0..c_in {
                                let xr = &vx[(bi * c_in + c) * spatial..(bi * c_in + c + 1) * spatial];
                                dp[o * c_in + c] += g.iter().zip(xr).map(|(&g, &x)| g * x).sum::<T>();
                            }
                        }
                    }
                    acc(p, dp);
                }
            }
            Op::Scale(x, f) => acc(x, dy.iter().map(|&g| g * f).collect()),
            Op::Softmax { x, temp } => {
                let y = node.value.data();
                let n = self.shape(x)[1];
                let mut dx = vec![T::ZERO; y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot) / temp;
                    }
                }
                acc(x, dx);
            }
            Op::LnEps { x, eps } => {
                acc(x, dy.iter().zip(val(x)).map(|(&g, &v)| g / (v + eps)).collect());
            }
            Op::SliceCols { x, start } => {
                let (rows, n) = (self.shape(x)[0], self.shape(x)[1]);
                let len = node.value.shape()[1];
                let mut dx = vec![T::ZERO; rows * n];
                for r in 0..rows {
                    dx[r * n + start..r * n + start + len].copy_from_slice(&dy[r * len..(r + 1) * len]);
                }
                acc(x, dx);
            }
            Op::Sum(x) => acc(x, vec![dy[0]; val(x).len()]),
        }
    }
}

fn column_sums<T: Scalar>(dy: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; width];
    for row in dy.chunks(width) {
        out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
    }
    out
}

fn reduce_broadcast<T: Scalar>(dy: &[T], small: usize, bcast: Bcast) -> Vec<T> {
    match bcast {
        Bcast::Same => dy.to_vec(),
        Bcast::Leading => dy
            .chunks(dy.len() / small)
            .map(|c| c.iter().copied().sum())
            .collect(),
        Bcast::Trailing => column_sums(dy, small),
    }
}

fn expand_broadcast<T: Scalar>(v: &[T], big: usize, bcast: Bcast) -> Vec<T> {
    match bcast {
        Bcast::Same => v.to_vec(),
        Bcast::Leading => v
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, big / v.len()))
            .collect(),
        Bcast::Trailing => v.iter().copied().cycle().take(big).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn power_rule() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let mut g = Graph::new();
        let w = g.param(t(&[1, 1], &[0.0]));
        let x = g.constant(t(&[1, 1], &[1.0]));
        let wx = g.matmul(w, x).unwrap();
        let s = g.sigmoid(wx).unwrap();
        let loss = g.sum(s).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[0.25]);
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = a·x + b·x: the gradient is the sum of both single paths
        let build = |use_a: bool, use_b: bool| {
            let mut g = Graph::new();
            let x = g.param(t(&[3], &[0.5, -1.0, 2.0]));
            let a = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
            let b = g.constant(t(&[3], &[-4.0, 0.5, 1.5]));
            let mut terms = Vec::new();
            if use_a {
                terms.push(g.mul(x, a).unwrap());
            }
            if use_b {
                terms.push(g.mul(x, b).unwrap());
            }
            let total = if terms.len() == 2 {
                g.add(terms[0], terms[1]).unwrap()
            } else {
                terms[0]
            };
            let loss = g.sum(total).unwrap();
            g.backward(loss).unwrap();
            g.grad(x).unwrap().clone()
        };
        let both = build(true, true);
        let ga = build(true, false);
        let gb = build(false, true);
        for i in 0..3 {
            assert_eq!(both.data()[i], ga.data()[i] + gb.data()[i]);
        }
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let s = g.sum(c).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Detached)));
    }

    #[test]
    fn constants_never_receive_gradients() {
        let mut g = Graph::new();
        let w = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let x = g.param(t(&[1, 2], &[1.0, 1.0]));
        let y = g.linear(x, w, None).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn trailing_and_leading_broadcast_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1.0; 6]));
        let row = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let col = g.constant(t(&[2], &[10.0, 20.0]));
        let r = g.add_row(x, row).unwrap();
        assert_eq!(g.value(r).data(), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
        let c = g.mul_channel(x, col).unwrap();
        assert_eq!(g.value(c).data(), &[10.0, 10.0, 10.0, 20.0, 20.0, 20.0]);
        assert!(g.add_row(x, col).is_err());
        assert!(g.mul_channel(x, row).is_err());
    }
}
