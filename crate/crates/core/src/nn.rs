//! Layer-structured networks, channel attention, initialization and parameter
//! counting.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputShape {
    Vector { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl InputShape {
    /// Sample shape without the batch axis.
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            InputShape::Vector { dim } => vec![dim],
            InputShape::Image { channels, height, width } => vec![channels, height, width],
        }
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    /// Stride-1 conv, bias, ReLU.
    ConvBlock { kernel: usize, padding: usize },
}

/// One hidden layer. `input`/`output` are widths for linear layers and channel
/// counts for conv blocks. Every hidden layer is followed by ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub input: usize,
    pub output: usize,
}

/// Hidden layers plus a linear head. Spatial features are globally average
/// pooled before the head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
    pub head_dim: usize,
}

impl NetworkSpec {
    /// Two ReLU hidden layers of `width` units.
    pub fn tiny_mlp(input_dim: usize, width: usize, head_dim: usize) -> Self {
        NetworkSpec {
            input: InputShape::Vector { dim: input_dim },
            layers: vec![
                LayerSpec { kind: LayerKind::Linear, input: input_dim, output: width },
                LayerSpec { kind: LayerKind::Linear, input: width, output: width },
            ],
            head_dim,
        }
    }

    /// Two 3×3 conv blocks (padding 1), global average pooling and a linear head.
    pub fn tiny_conv(input: InputShape, channels: [usize; 2], head_dim: usize) -> Self {
        let in_ch = match input {
            InputShape::Image { channels, .. } => channels,
            InputShape::Vector { dim } => dim,
        };
        let block = |i, o| LayerSpec {
            kind: LayerKind::ConvBlock { kernel: 3, padding: 1 },
            input: i,
            output: o,
        };
        NetworkSpec {
            input,
            layers: vec![block(in_ch, channels[0]), block(channels[0], channels[1])],
            head_dim,
        }
    }

    pub fn with_head(&self, head_dim: usize) -> Self {
        NetworkSpec { head_dim, ..self.clone() }
    }

    /// Per-sample feature shape after every hidden layer.
    pub fn feature_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = self.input.dims();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            if l.input == 0 || l.output == 0 || cur[0] != l.input {
                return Err(Error::invalid(format!(
                    "layer {i}: expects {} inputs but receives {cur:?}",
                    l.input
                )));
            }
            cur = match (l.kind, cur.as_slice()) {
                (LayerKind::Linear, [_]) => vec![l.output],
                (LayerKind::ConvBlock { kernel, padding }, [_, h, w]) => {
                    if kernel == 0 || kernel > h + 2 * padding || kernel > w + 2 * padding {
                        return Err(Error::invalid(format!("layer {i}: kernel {kernel} too large")));
                    }
                    vec![l.output, h + 2 * padding + 1 - kernel, w + 2 * padding + 1 - kernel]
                }
                (kind, shape) => {
                    return Err(Error::invalid(format!("layer {i}: {kind:?} cannot follow features {shape:?}")))
                }
            };
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 {
            return Err(Error::invalid("head_dim must be at least 1"));
        }
        if self.input.numel() == 0 {
            return Err(Error::invalid("input dimensions must be positive"));
        }
        self.feature_shapes().map(|_| ())
    }

    /// Width feeding the head.
    pub fn penultimate_width(&self) -> usize {
        match self.layers.last() {
            Some(l) => l.output,
            None => self.input.dims()[0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", content = "value", rename_all = "snake_case")]
pub enum InitScheme {
    /// `U(−√(6/fan_in), √(6/fan_in))` weights, zero biases.
    FanInUniform,
    /// Every weight and bias set to the value.
    Constant(f64),
    /// Orthonormal rows (or columns, whichever is shorter) of the weight viewed
    /// as `[out × fan_in]`, zero biases.
    OrthogonalLike,
}

/// Weight and bias of one layer. Linear weights are `[out×in]`, conv kernels
/// `[out×in×k×k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    fn init(shape: Vec<usize>, scheme: InitScheme, rng: &mut Rng) -> Self {
        let out = shape[0];
        let fan_in: usize = shape[1..].iter().product();
        let n = out * fan_in;
        let (w, b) = match scheme {
            InitScheme::FanInUniform => (fan_in_uniform(n, fan_in, rng), vec![T::ZERO; out]),
            InitScheme::Constant(c) => (vec![T::from_f64(c); n], vec![T::from_f64(c); out]),
            InitScheme::OrthogonalLike => (orthogonal(out, fan_in, rng), vec![T::ZERO; out]),
        };
        Dense {
            weight: Tensor::from_parts(shape, w),
            bias: Tensor::from_parts(vec![out], b),
        }
    }
}

pub(crate) fn fan_in_uniform<T: Scalar>(n: usize, fan_in: usize, rng: &mut Rng) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| T::from_f64(rng.random_range(-bound..=bound)))
        .collect()
}

fn orthogonal<T: Scalar>(rows: usize, cols: usize, rng: &mut Rng) -> Vec<T> {
    // Gram-Schmidt over the shorter dimension.
    let (vecs, len) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vecs);
    while basis.len() < vecs {
        let mut v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut out = vec![T::ZERO; rows * cols];
    for (i, b) in basis.iter().enumerate() {
        for (j, &x) in b.iter().enumerate() {
            let (r, c) = if rows <= cols { (i, j) } else { (j, i) };
            out[r * cols + c] = T::from_f64(x);
        }
    }
    out
}

/// Anything holding trainable tensors. Tensor order is stable and shared by
/// [`Parameters::tensors`], [`Parameters::tensors_mut`] and graph bindings.
pub trait Parameters<T: Scalar> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }
}

impl<T: Scalar, P: Parameters<T>> Parameters<T> for [P] {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.iter()
            .enumerate()
            .flat_map(|(i, p)| {
                p.named_tensors()
                    .into_iter()
                    .map(move |(n, t)| (format!("{i}.{n}"), t))
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.iter_mut().flat_map(|p| p.tensors_mut()).collect()
    }
}

/// Exact number of scalar parameters.
pub fn count_params<T: Scalar, P: Parameters<T> + ?Sized>(p: &P) -> usize {
    p.tensors().iter().map(|t| t.len()).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    pub spec: NetworkSpec,
    pub layers: Vec<Dense<T>>,
    pub head: Dense<T>,
    pub init: InitScheme,
}

/// Deterministic initialization from `seed`.
pub fn init_params<T: Scalar>(spec: &NetworkSpec, scheme: InitScheme, seed: u64) -> Result<NetworkParams<T>> {
    spec.validate()?;
    let mut rng = rng::stream(seed, &[rng::tag("init")]);
    let layers = spec
        .layers
        .iter()
        .map(|l| {
            let shape = match l.kind {
                LayerKind::Linear => vec![l.output, l.input],
                LayerKind::ConvBlock { kernel, .. } => vec![l.output, l.input, kernel, kernel],
            };
            Dense::init(shape, scheme, &mut rng)
        })
        .collect();
    let head = Dense::init(vec![spec.head_dim, spec.penultimate_width()], scheme, &mut rng);
    Ok(NetworkParams {
        spec: spec.clone(),
        layers,
        head,
        init: scheme,
    })
}

impl<T: Scalar> Parameters<T> for NetworkParams<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), &l.weight));
            out.push((format!("layer{i}.bias"), &l.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }
}

/// Node ids of a network's parameters inside one graph.
#[derive(Clone, Debug)]
pub struct BoundNetwork {
    pub layers: Vec<(NodeId, NodeId)>,
    pub head: (NodeId, NodeId),
}

impl BoundNetwork {
    /// Ids in [`Parameters::tensors`] order.
    pub fn nodes(&self) -> Vec<NodeId> {
        self.layers
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .chain([self.head.0, self.head.1])
            .collect()
    }
}

impl<T: Scalar> NetworkParams<T> {
    pub fn head_dim(&self) -> usize {
        self.spec.head_dim
    }

    /// Adds the parameters to `g` as tracked leaves or, when frozen, constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundNetwork {
        let mut leaf = |t: &Tensor<T>| g.leaf(t.clone(), trainable);
        let layers = self
            .layers
            .iter()
            .map(|l| (leaf(&l.weight), leaf(&l.bias)))
            .collect();
        let head = (leaf(&self.head.weight), leaf(&self.head.bias));
        BoundNetwork { layers, head }
    }

    /// Appends `extra` output units to the head. Existing rows are kept
    /// bit-exactly; new rows are fan-in uniform with zero bias.
    pub fn expand_head(&mut self, extra: usize, rng: &mut Rng) -> Result<()> {
        if extra == 0 {
            return Err(Error::invalid("head expansion must add at least one unit"));
        }
        let fan_in = self.spec.penultimate_width();
        let mut w = std::mem::replace(&mut self.head.weight, Tensor::scalar(T::ZERO)).into_data();
        w.extend(fan_in_uniform::<T>(extra * fan_in, fan_in, rng));
        let mut b = std::mem::replace(&mut self.head.bias, Tensor::scalar(T::ZERO)).into_data();
        b.extend(std::iter::repeat_n(T::ZERO, extra));
        self.spec.head_dim += extra;
        self.head.weight = Tensor::from_parts(vec![self.spec.head_dim, fan_in], w);
        self.head.bias = Tensor::from_parts(vec![self.spec.head_dim], b);
        Ok(())
    }

    /// Logits of a batch, without tracking.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xi = g.constant(x.clone());
        let (logits, _) = forward_plain(&mut g, &self.spec, &bound, xi)?;
        Ok(g.value(logits).clone())
    }
}

pub(crate) fn check_input<T: Scalar>(g: &Graph<T>, spec: &NetworkSpec, x: NodeId) -> Result<()> {
    let shape = g.shape(x);
    if shape.len() < 2 || shape[1..] != *spec.input.dims() {
        let mut expect = vec![0];
        expect.extend(spec.input.dims());
        return Err(Error::mismatch("network input", shape, &expect));
    }
    Ok(())
}

/// One hidden layer followed by ReLU.
pub fn layer_forward<T: Scalar>(
    g: &mut Graph<T>,
    layer: &LayerSpec,
    (w, b): (NodeId, NodeId),
    h: NodeId,
) -> Result<NodeId> {
    let pre = match layer.kind {
        LayerKind::Linear => g.linear(h, w, Some(b))?,
        LayerKind::ConvBlock { padding, .. } => g.conv2d(h, w, Some(b), padding)?,
    };
    g.relu(pre)
}

/// Raw head logits; spatial features are pooled first.
pub fn head_forward<T: Scalar>(g: &mut Graph<T>, (w, b): (NodeId, NodeId), h: NodeId) -> Result<NodeId> {
    let flat = if g.value(h).ndim() > 2 { g.gap(h)? } else { h };
    g.linear(flat, w, Some(b))
}

/// Hidden activations of every layer, without the head.
pub fn forward_body<T: Scalar>(
    g: &mut Graph<T>,
    spec: &NetworkSpec,
    bound: &BoundNetwork,
    x: NodeId,
) -> Result<Vec<NodeId>> {
    check_input(g, spec, x)?;
    let mut hidden = Vec::with_capacity(spec.layers.len());
    let mut h = x;
    for (layer, &p) in spec.layers.iter().zip(&bound.layers) {
        h = layer_forward(g, layer, p, h)?;
        hidden.push(h);
    }
    Ok(hidden)
}

/// Plain forward pass: ReLU hidden layers, raw head logits.
pub fn forward_plain<T: Scalar>(
    g: &mut Graph<T>,
    spec: &NetworkSpec,
    bound: &BoundNetwork,
    x: NodeId,
) -> Result<(NodeId, Vec<NodeId>)> {
    let hidden = forward_body(g, spec, bound, x)?;
    let last = hidden.last().copied().unwrap_or(x);
    let logits = head_forward(g, bound.head, last)?;
    Ok((logits, hidden))
}

/// Efficient channel attention: a 1-D conv over pooled channel descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct EcaParams<T> {
    pub kernel: Tensor<T>,
}

impl<T: Scalar> EcaParams<T> {
    pub fn new(kernel: Tensor<T>) -> Result<Self> {
        match kernel.shape() {
            [k] if k % 2 == 1 && *k >= 3 => Ok(EcaParams { kernel }),
            s => Err(Error::invalid(format!("ECA kernel must be odd and at least 3, got {s:?}"))),
        }
    }

    /// Adaptive kernel size for `channels`: `t = ⌊|log₂C / 2 + 1/2|⌋`, bumped
    /// to odd, at least 3, at most the largest odd size that still overlaps
    /// the channel axis (`2C + 1`).
    pub fn adaptive_kernel_size(channels: usize) -> usize {
        let t = ((channels as f64).log2() / 2.0 + 0.5).abs().floor() as usize;
        let k = if t % 2 == 1 { t } else { t + 1 };
        k.clamp(3, 2 * channels + 1)
    }

    /// Fan-in uniform kernel of adaptive size.
    pub fn init(channels: usize, rng: &mut Rng) -> Self {
        let k = Self::adaptive_kernel_size(channels);
        EcaParams {
            kernel: Tensor::from_parts(vec![k], fan_in_uniform(k, k, rng)),
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.len()
    }
}

/// `x ⊗ sigmoid(conv1d(GAP(x)))` on a bound kernel; `x` is `[B×C]` or `[B×C×H×W]`.
pub fn eca_forward<T: Scalar>(g: &mut Graph<T>, kernel: NodeId, x: NodeId) -> Result<NodeId> {
    let c = *g.shape(x).get(1).unwrap_or(&0);
    let k = g.shape(kernel).iter().product::<usize>();
    if c == 0 || k > 2 * c + 1 {
        return Err(Error::invalid(format!(
            "ECA kernel of size {k} cannot be applied to {c} channels"
        )));
    }
    let pooled = g.gap(x)?;
    let conv = g.channel_conv1d(pooled, kernel)?;
    let s = g.sigmoid(conv)?;
    g.mul_channel(x, s)
}

/// Channel attention on a single `[C×H×W]` map or a `[C]` vector.
pub fn eca_attention<T: Scalar>(params: &EcaParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut batched = vec![1];
    batched.extend_from_slice(x.shape());
    if !(batched.len() == 2 || batched.len() == 4) {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "ECA expects [C] or [C×H×W]".into(),
        });
    }
    let mut g = Graph::new();
    let k = g.constant(params.kernel.clone());
    let xi = g.constant(x.clone().reshape(batched)?);
    let y = eca_forward(&mut g, k, xi)?;
    g.value(y).clone().reshape(x.shape().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul, relu};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, &[]);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_network_gives_bias_logits() {
        let spec = NetworkSpec::tiny_mlp(3, 4, 2);
        let mut p = init_params::<f64>(&spec, InitScheme::Constant(0.0), 0).unwrap();
        p.head.bias = t(&[2], &[0.5, -1.5]);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let x = g.constant(random(&[5, 3], 1));
        let (logits, hidden) = forward_plain(&mut g, &spec, &b, x).unwrap();
        for h in hidden {
            assert!(g.value(h).data().iter().all(|&v| v == 0.0));
        }
        for row in g.value(logits).data().chunks(2) {
            assert_eq!(row, &[0.5, -1.5]);
        }
    }

    #[test]
    fn identity_layer_then_relu() {
        let spec = NetworkSpec {
            input: InputShape::Vector { dim: 2 },
            layers: vec![LayerSpec { kind: LayerKind::Linear, input: 2, output: 2 }],
            head_dim: 1,
        };
        let mut p = init_params::<f64>(&spec, InitScheme::Constant(0.0), 0).unwrap();
        p.layers[0].weight = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let x = g.constant(t(&[1, 2], &[1.0, -2.0]));
        let (_, hidden) = forward_plain(&mut g, &spec, &b, x).unwrap();
        assert_eq!(g.value(hidden[0]).data(), &[1.0, 0.0]);
    }

    #[test]
    fn mlp_matches_matrix_script() {
        let spec = NetworkSpec::tiny_mlp(4, 5, 3);
        let p = init_params::<f64>(&spec, InitScheme::FanInUniform, 42).unwrap();
        let x = random(&[6, 4], 7);
        // Independent route: explicit transposes and eager matmuls.
        let transpose = |w: &Tensor<f64>| {
            let (r, c) = (w.shape()[0], w.shape()[1]);
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] = w.data()[i * c + j];
                }
            }
            t(&[c, r], &d)
        };
        let affine = |h: &Tensor<f64>, l: &Dense<f64>| {
            let mut y = matmul(h, &transpose(&l.weight)).unwrap();
            let n = l.bias.len();
            for (i, v) in y.data_mut().iter_mut().enumerate() {
                *v += l.bias.data()[i % n];
            }
            y
        };
        let h1 = relu(&affine(&x, &p.layers[0]));
        let h2 = relu(&affine(&h1, &p.layers[1]));
        let expect = affine(&h2, &p.head);
        let got = p.logits(&x).unwrap();
        for (a, b) in got.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn input_shape_is_checked() {
        let spec = NetworkSpec::tiny_mlp(4, 5, 3);
        let p = init_params::<f64>(&spec, InitScheme::FanInUniform, 1).unwrap();
        assert!(matches!(p.logits(&random(&[2, 3], 0)), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn conv_network_runs() {
        let input = InputShape::Image { channels: 1, height: 6, width: 6 };
        let spec = NetworkSpec::tiny_conv(input, [3, 4], 2);
        assert_eq!(spec.feature_shapes().unwrap(), vec![vec![3, 6, 6], vec![4, 6, 6]]);
        let p = init_params::<f64>(&spec, InitScheme::FanInUniform, 1).unwrap();
        let y = p.logits(&random(&[2, 1, 6, 6], 3)).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
    }

    #[test]
    fn spec_validation() {
        let mut spec = NetworkSpec::tiny_mlp(4, 5, 3);
        spec.layers[1].input = 6;
        assert!(spec.validate().is_err());
        assert!(NetworkSpec::tiny_mlp(4, 5, 0).validate().is_err());
        let bad = NetworkSpec {
            input: InputShape::Vector { dim: 3 },
            layers: vec![LayerSpec { kind: LayerKind::ConvBlock { kernel: 3, padding: 1 }, input: 3, output: 2 }],
            head_dim: 2,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn eca_zero_kernel_halves() {
        let p = EcaParams::new(Tensor::<f64>::zeros(vec![3])).unwrap();
        let x = random(&[4, 2, 2], 5);
        let y = eca_attention(&p, &x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, b / 2.0);
        }
    }

    #[test]
    fn eca_single_channel_center_tap() {
        let p = EcaParams::new(t(&[3], &[0.0, 1.0, 0.0])).unwrap();
        let x = Tensor::<f64>::full(vec![1, 3, 3], 2.0);
        let y = eca_attention(&p, &x).unwrap();
        let s = 1.0 / (1.0 + (-2.0f64).exp());
        for &v in y.data() {
            assert!((v - 2.0 * s).abs() < 1e-15);
            assert!((v - 1.7616).abs() < 1e-4);
        }
    }

    #[test]
    fn eca_matches_loop_oracle() {
        let p = EcaParams::new(random(&[3], 8)).unwrap();
        let x = random(&[8, 4, 4], 9);
        let k = p.kernel.data();
        let pooled: Vec<f64> = x.data().chunks(16).map(|c| c.iter().sum::<f64>() / 16.0).collect();
        let mut expect = x.data().to_vec();
        for c in 0..8 {
            let mut z = 0.0;
            for j in 0..3 {
                let src = c as isize + j as isize - 1;
                if (0..8).contains(&src) {
                    z += k[j] * pooled[src as usize];
                }
            }
            let s = 1.0 / (1.0 + (-z).exp());
            expect[c * 16..(c + 1) * 16].iter_mut().for_each(|v| *v *= s);
        }
        let y = eca_attention(&p, &x).unwrap();
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
        // vector input is its own pooled descriptor
        let v = random(&[8], 10);
        let yv = eca_attention(&p, &v).unwrap();
        assert_eq!(yv.shape(), &[8]);
    }

    #[test]
    fn eca_kernel_rules() {
        assert!(EcaParams::new(Tensor::<f64>::zeros(vec![4])).is_err());
        assert!(EcaParams::new(Tensor::<f64>::zeros(vec![1])).is_err());
        assert_eq!(EcaParams::<f64>::adaptive_kernel_size(1), 3);
        assert_eq!(EcaParams::<f64>::adaptive_kernel_size(16), 3);
        assert_eq!(EcaParams::<f64>::adaptive_kernel_size(64), 3);
        assert_eq!(EcaParams::<f64>::adaptive_kernel_size(128), 5);
        assert_eq!(EcaParams::<f64>::adaptive_kernel_size(512), 5);
        let wide = EcaParams::new(Tensor::<f64>::zeros(vec![7])).unwrap();
        assert!(eca_attention(&wide, &random(&[2], 0)).is_err());
    }

    #[test]
    fn init_schemes() {
        let spec = NetworkSpec::tiny_mlp(6, 8, 3);
        let ones = init_params::<f64>(&spec, InitScheme::Constant(1.0), 0).unwrap();
        assert!(ones.tensors().iter().all(|t| t.data().iter().all(|&v| v == 1.0)));
        let zeros = init_params::<f64>(&spec, InitScheme::Constant(0.0), 0).unwrap();
        assert!(zeros.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        let u = init_params::<f64>(&spec, InitScheme::FanInUniform, 3).unwrap();
        // first layer has fan_in 6: bound √(6/6) = 1
        assert!(u.layers[0].weight.data().iter().all(|v| v.abs() <= 1.0));
        assert!(u.layers[0].bias.data().iter().all(|&v| v == 0.0));
        let o = init_params::<f64>(&spec, InitScheme::OrthogonalLike, 3).unwrap();
        let w = &o.layers[0].weight; // 8×6: columns orthonormal
        for a in 0..6 {
            for b in 0..6 {
                let d: f64 = (0..8).map(|r| w.data()[r * 6 + a] * w.data()[r * 6 + b]).sum();
                assert!((d - if a == b { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn init_is_reproducible() {
        let spec = NetworkSpec::tiny_mlp(6, 8, 3);
        let a = init_params::<f32>(&spec, InitScheme::FanInUniform, 9).unwrap();
        let b = init_params::<f32>(&spec, InitScheme::FanInUniform, 9).unwrap();
        let c = init_params::<f32>(&spec, InitScheme::FanInUniform, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_counts() {
        let single = NetworkSpec {
            input: InputShape::Vector { dim: 3 },
            layers: vec![],
            head_dim: 2,
        };
        let p = init_params::<f64>(&single, InitScheme::FanInUniform, 0).unwrap();
        assert_eq!(count_params(&p), 8);
        let none: Vec<NetworkParams<f64>> = Vec::new();
        assert_eq!(count_params(none.as_slice()), 0);
        let mlp = NetworkSpec {
            input: InputShape::Vector { dim: 4 },
            layers: vec![LayerSpec { kind: LayerKind::Linear, input: 4, output: 5 }],
            head_dim: 3,
        };
        let p = init_params::<f64>(&mlp, InitScheme::FanInUniform, 0).unwrap();
        assert_eq!(count_params(&p), 43);
    }

    #[test]
    fn adding_a_layer_adds_its_size() {
        let mut spec = NetworkSpec::tiny_mlp(4, 6, 2);
        let before = count_params(&init_params::<f64>(&spec, InitScheme::FanInUniform, 0).unwrap());
        spec.layers.push(LayerSpec { kind: LayerKind::Linear, input: 6, output: 6 });
        let after = count_params(&init_params::<f64>(&spec, InitScheme::FanInUniform, 0).unwrap());
        assert_eq!(after - before, 6 * 6 + 6);
    }

    #[test]
    fn head_expansion_keeps_old_rows() {
        let spec = NetworkSpec::tiny_mlp(4, 6, 2);
        let p = init_params::<f64>(&spec, InitScheme::FanInUniform, 0).unwrap();
        let mut a = p.clone();
        a.expand_head(3, &mut rng::stream(1, &[])).unwrap();
        assert_eq!(a.head_dim(), 5);
        assert_eq!(&a.head.weight.data()[..12], p.head.weight.data());
        assert_eq!(count_params(&a) - count_params(&p), 3 * (6 + 1));
        let mut twice = p.clone();
        let mut r = rng::stream(1, &[]);
        twice.expand_head(1, &mut r).unwrap();
        twice.expand_head(1, &mut r).unwrap();
        let mut once = p.clone();
        once.expand_head(2, &mut rng::stream(1, &[])).unwrap();
        assert_eq!(&twice.head.weight.data()[..12], &once.head.weight.data()[..12]);
        assert_eq!(twice.head.weight.shape(), once.head.weight.shape());
        assert!(a.expand_head(0, &mut r).is_err());
    }
}
