//! Slice-level kernels shared by the eager ops and the graph's forward and
//! backward rules. Shapes are validated by the callers.

use crate::scalar::Scalar;

/// `a[m×k] · b[k×n]`
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::ZERO {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::ZERO {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }
    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }
}

/// Stride-1 zero-padded cross-correlation over a batch.
pub(crate) fn conv2d<T: Scalar>(x: &[T], k: &[T], d: ConvDims) -> Vec<T> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut out = vec![T::ZERO; d.batch * d.c_out * oh * ow];
    for b in 0..d.batch {
        for o in 0..d.c_out {
            let plane = &mut out[(b * d.c_out + o) * oh * ow..(b * d.c_out + o + 1) * oh * ow];
            for c in 0..d.c_in {
                let xin = &x[(b * d.c_in + c) * d.h * d.w..(b * d.c_in + c + 1) * d.h * d.w];
                for u in 0..d.kh {
                    for v in 0..d.kw {
                        let kv = k[((o * d.c_in + c) * d.kh + u) * d.kw + v];
                        if kv == T::ZERO {
                            continue;
                        }
                        for y in 0..oh {
                            let iy = y + u;
                            if iy < d.pad || iy - d.pad >= d.h {
                                continue;
                            }
                            let xrow = &xin[(iy - d.pad) * d.w..(iy - d.pad + 1) * d.w];
                            let orow = &mut plane[y * ow..(y + 1) * ow];
                            for (xo, out_v) in orow.iter_mut().enumerate() {
                                let ix = xo + v;
                                if ix < d.pad || ix - d.pad >= d.w {
                                    continue;
                                }
                                *out_v += kv * xrow[ix - d.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    k: &[T],
    dy: &[T],
    d: ConvDims,
    want_dx: bool,
    want_dk: bool,
) -> (Vec<T>, Vec<T>) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut dx = if want_dx { vec![T::ZERO; x.len()] } else { Vec::new() };
    let mut dk = if want_dk { vec![T::ZERO; k.len()] } else { Vec::new() };
    for b in 0..d.batch {
        for o in 0..d.c_out {
            let gplane = &dy[(b * d.c_out + o) * oh * ow..(b * d.c_out + o + 1) * oh * ow];
            for c in 0..d.c_in {
                let xbase = (b * d.c_in + c) * d.h * d.w;
                for u in 0..d.kh {
                    for v in 0..d.kw {
                        let kidx = ((o * d.c_in + c) * d.kh + u) * d.kw + v;
                        let kv = k[kidx];
                        let mut acc = T::ZERO;
                        for y in 0..oh {
                            let iy = y + u;
                            if iy < d.pad || iy - d.pad >= d.h {
                                continue;
                            }
                            let row = xbase + (iy - d.pad) * d.w;
                            for xo in 0..ow {
                                let ix = xo + v;
                                if ix < d.pad || ix - d.pad >= d.w {
                                    continue;
                                }
                                let g = gplane[y * ow + xo];
                                if want_dk {
                                    acc += g * x[row + ix - d.pad];
                                }
                                if want_dx {
                                    dx[row + ix - d.pad] += g * kv;
                                }
                            }
                        }
                        if want_dk {
                            dk[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// Zero-padded "same" cross-correlation along the channel axis of `x[rows×c]`.
pub(crate) fn channel_conv1d<T: Scalar>(x: &[T], kernel: &[T], rows: usize, c: usize) -> Vec<T> {
    let half = kernel.len() / 2;
    let mut out = vec![T::ZERO; rows * c];
    for r in 0..rows {
        let xr = &x[r * c..(r + 1) * c];
        for ch in 0..c {
            let mut acc = T::ZERO;
            for (j, &kv) in kernel.iter().enumerate() {
                let src = ch + j;
                if src < half || src - half >= c {
                    continue;
                }
                acc += kv * xr[src - half];
            }
            out[r * c + ch] = acc;
        }
    }
    out
}

pub(crate) fn channel_conv1d_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    rows: usize,
    c: usize,
) -> (Vec<T>, Vec<T>) {
    let half = kernel.len() / 2;
    let mut dx = vec![T::ZERO; x.len()];
    let mut dk = vec![T::ZERO; kernel.len()];
    for r in 0..rows {
        for ch in 0..c {
            let g = dy[r * c + ch];
            for (j, &kv) in kernel.iter().enumerate() {
                let src = ch + j;
                if src < half || src - half >= c {
                    continue;
                }
                let xi = r * c + src - half;
                dx[xi] += g * kv;
                dk[j] += g * x[xi];
            }
        }
    }
    (dx, dk)
}

/// `y[b,o,s] = Σ_c p[o,c] · x[b,c,s]`
pub(crate) fn channel_mix<T: Scalar>(
    x: &[T],
    p: &[T],
    batch: usize,
    c_in: usize,
    c_out: usize,
    spatial: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; batch * c_out * spatial];
    for b in 0..batch {
        for o in 0..c_out {
            let orow = &mut out[(b * c_out + o) * spatial..(b * c_out + o + 1) * spatial];
            for c in 0..c_in {
                let pv = p[o * c_in + c];
                if pv == T::ZERO {
                    continue;
                }
                let xrow = &x[(b * c_in + c) * spatial..(b * c_in + c + 1) * spatial];
                for (ov, &xv) in orow.iter_mut().zip(xrow) {
                    *ov += pv * xv;
                }
            }
        }
    }
    out
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Row-wise `softmax(x / t)` over rows of width `n`, with max subtraction.
pub(crate) fn softmax_rows<T: Scalar>(x: &[T], n: usize, t: T) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for (xr, or) in x.chunks(n).zip(out.chunks_mut(n)) {
        let m = xr.iter().copied().fold(xr[0], T::max);
        let mut z = T::ZERO;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = ((v - m) / t).exp();
            z += *o;
        }
        for o in or.iter_mut() {
            *o = *o / z;
        }
    }
    out
}
