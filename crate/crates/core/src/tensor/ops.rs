use super::kernels::{self, ConvDims};
use super::{check_finite, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `a[m×k] · b[k×n]`
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let out = Tensor::from_parts(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n));
    check_finite("matmul", &out)?;
    Ok(out)
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((*m, *k, *n)),
        _ => Err(Error::mismatch("matmul", a, b)),
    }
}

/// Stride-1 cross-correlation of `x[C_in×H×W]` (or a batch `[B×C_in×H×W]`) with
/// `k[C_out×C_in×h×w]`, zero padding `pad` on every side.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let d = conv_dims(x.shape(), k.shape(), pad)?;
    let data = kernels::conv2d(x.data(), k.data(), d);
    let shape = if x.ndim() == 3 {
        vec![d.c_out, d.out_h(), d.out_w()]
    } else {
        vec![d.batch, d.c_out, d.out_h(), d.out_w()]
    };
    let out = Tensor::from_parts(shape, data);
    check_finite("conv2d", &out)?;
    Ok(out)
}

pub(crate) fn conv_dims(x: &[usize], k: &[usize], pad: usize) -> Result<ConvDims> {
    let (batch, c_in, h, w) = match x {
        [c, h, w] => (1, *c, *h, *w),
        [b, c, h, w] => (*b, *c, *h, *w),
        _ => return Err(Error::mismatch("conv2d", x, k)),
    };
    let [c_out, kc, kh, kw] = k else {
        return Err(Error::mismatch("conv2d", x, k));
    };
    if *kc != c_in {
        return Err(Error::mismatch("conv2d", x, k));
    }
    if *kh > h + 2 * pad || *kw > w + 2 * pad {
        return Err(Error::InvalidArgument(format!(
            "conv2d: kernel {kh}×{kw} larger than padded input {}×{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    Ok(ConvDims {
        batch,
        c_in,
        h,
        w,
        c_out: *c_out,
        kh: *kh,
        kw: *kw,
        pad,
    })
}

/// Mean over the spatial axes: `[C×H×W] → [C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, h, w] = x.shape() else {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "global_avg_pool expects C×H×W".into(),
        });
    };
    let s = h * w;
    let inv = T::from_f64(1.0 / s as f64);
    let data = x
        .data()
        .chunks(s)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Ok(Tensor::from_parts(vec![*c], data))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Relu,
    Sigmoid,
    Add,
    Mul,
}

/// Dispatches one of the elementwise kinds. Unary kinds take one argument,
/// binary kinds two.
pub fn elementwise<T: Scalar>(kind: Elementwise, args: &[&Tensor<T>]) -> Result<Tensor<T>> {
    match (kind, args) {
        (Elementwise::Relu, [x]) => Ok(relu(x)),
        (Elementwise::Sigmoid, [x]) => Ok(sigmoid(x)),
        (Elementwise::Add, [a, b]) => add(a, b),
        (Elementwise::Mul, [a, b]) => mul(a, b),
        _ => Err(Error::invalid(format!(
            "{kind:?} does not take {} arguments",
            args.len()
        ))),
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(kernels::sigmoid)
}

/// Elementwise sum. A tensor whose shape is a leading prefix of the other's
/// (for example a `[C]` vector against a `[C×H×W]` map) is broadcast along the
/// trailing axes.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary("add", a, b, |x, y| x + y)
}

/// Elementwise product with the same channel broadcasting as [`add`].
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary("mul", a, b, |x, y| x * y)
}

fn binary<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let (big, small, swapped) = if a.ndim() >= b.ndim() {
        (a, b, false)
    } else {
        (b, a, true)
    };
    let inner = leading_broadcast(op, big.shape(), small.shape())?;
    let data = big
        .data()
        .chunks(inner)
        .zip(small.data())
        .flat_map(|(chunk, &s)| {
            let f = &f;
            chunk
                .iter()
                .map(move |&v| if swapped { f(s, v) } else { f(v, s) })
        })
        .collect();
    let out = Tensor::from_parts(big.shape().to_vec(), data);
    check_finite(op, &out)?;
    Ok(out)
}

/// Number of trailing elements each entry of `small` covers when broadcast
/// over `big`.
pub(crate) fn leading_broadcast(op: &'static str, big: &[usize], small: &[usize]) -> Result<usize> {
    if small.len() > big.len() || big[..small.len()] != *small {
        return Err(Error::mismatch(op, big, small));
    }
    Ok(big[small.len()..].iter().product())
}

/// `softmax(logits / t)` along the last axis of a vector or of each matrix row.
pub fn softmax_with_temperature<T: Scalar>(logits: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {t}")));
    }
    let n = match logits.shape() {
        [n] | [_, n] => *n,
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "softmax expects a vector or a matrix".into(),
            })
        }
    };
    let out = Tensor::from_parts(
        logits.shape().to_vec(),
        kernels::softmax_rows(logits.data(), n, T::from_f64(t)),
    );
    check_finite("softmax", &out)?;
    Ok(out)
}
