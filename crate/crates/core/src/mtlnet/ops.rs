//! Network primitives. Slice kernels (`*_fwd`, `*_bwd`) do the work and are
//! used directly by the model; the tensor-level functions wrap them with
//! shape checks. Backward kernels accumulate into their gradient outputs.

use rand::Rng as _;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `y = W x + b` with `W` row-major `[out, in]`.
pub(crate) fn linear_fwd<T: Scalar>(w: &[T], b: &[T], x: &[T], y: &mut [T]) {
    let n_in = x.len();
    for (o, yo) in y.iter_mut().enumerate() {
        *yo = b[o] + dot(&w[o * n_in..(o + 1) * n_in], x);
    }
}

pub(crate) fn linear_bwd<T: Scalar>(
    w: &[T],
    x: &[T],
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
    mut dx: Option<&mut [T]>,
) {
    let n_in = x.len();
    for (o, &g) in dy.iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        db[o] += g;
        axpy(g, x, &mut dw[o * n_in..(o + 1) * n_in]);
        if let Some(dx) = dx.as_deref_mut() {
            axpy(g, &w[o * n_in..(o + 1) * n_in], dx);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn out_hw(&self) -> (usize, usize) {
        (self.h + 2 * self.pad + 1 - self.kh, self.w + 2 * self.pad + 1 - self.kw)
    }

    /// Valid `(out_start, in_start, len)` span of one kernel tap along an axis.
    fn span(n_in: usize, n_out: usize, tap: usize, pad: usize) -> Option<(usize, usize, usize)> {
        let lo = pad.saturating_sub(tap);
        let hi = (n_in + pad).saturating_sub(tap).min(n_out);
        (hi > lo).then(|| (lo, lo + tap - pad, hi - lo))
    }
}

/// Stride-1 zero-padded 2-D convolution (cross-correlation) of `[cin, h, w]`
/// with kernels `[cout, cin, kh, kw]`; `y` is `[cout, ho, wo]`.
pub(crate) fn conv_fwd<T: Scalar>(s: ConvShape, x: &[T], k: &[T], b: &[T], y: &mut [T]) {
    let (ho, wo) = s.out_hw();
    for co in 0..s.cout {
        let yc = &mut y[co * ho * wo..(co + 1) * ho * wo];
        yc.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..s.cin {
            let xc = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
            for ky in 0..s.kh {
                let Some((oy0, iy0, ny)) = ConvShape::span(s.h, ho, ky, s.pad) else {
                    continue;
                };
                for kx in 0..s.kw {
                    let Some((ox0, ix0, nx)) = ConvShape::span(s.w, wo, kx, s.pad) else {
                        continue;
                    };
                    let wv = k[((co * s.cin + ci) * s.kh + ky) * s.kw + kx];
                    for r in 0..ny {
                        let src = &xc[(iy0 + r) * s.w + ix0..][..nx];
                        let dst = &mut yc[(oy0 + r) * wo + ox0..][..nx];
                        axpy(wv, src, dst);
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_bwd<T: Scalar>(
    s: ConvShape,
    x: &[T],
    k: &[T],
    dy: &[T],
    dk: &mut [T],
    db: &mut [T],
    mut dx: Option<&mut [T]>,
) {
    let (ho, wo) = s.out_hw();
    for co in 0..s.cout {
        let gc = &dy[co * ho * wo..(co + 1) * ho * wo];
        db[co] += gc.iter().copied().sum();
        for ci in 0..s.cin {
            let xc = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
            for ky in 0..s.kh {
                let Some((oy0, iy0, ny)) = ConvShape::span(s.h, ho, ky, s.pad) else {
                    continue;
                };
                for kx in 0..s.kw {
                    let Some((ox0, ix0, nx)) = ConvShape::span(s.w, wo, kx, s.pad) else {
                        continue;
                    };
                    let idx = ((co * s.cin + ci) * s.kh + ky) * s.kw + kx;
                    let wv = k[idx];
                    let mut acc = T::zero();
                    for r in 0..ny {
                        let g = &gc[(oy0 + r) * wo + ox0..][..nx];
                        acc += dot(g, &xc[(iy0 + r) * s.w + ix0..][..nx]);
                        if let Some(dx) = dx.as_deref_mut() {
                            let d = &mut dx[ci * s.h * s.w + (iy0 + r) * s.w + ix0..][..nx];
                            axpy(wv, g, d);
                        }
                    }
                    dk[idx] += acc;
                }
            }
        }
    }
}

pub(crate) fn relu_inplace<T: Scalar>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes `dy` where the activation output `y` was clamped.
pub(crate) fn relu_bwd_inplace<T: Scalar>(y: &[T], dy: &mut [T]) {
    for (g, &v) in dy.iter_mut().zip(y) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
}

pub(crate) fn softmax_inplace<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v = *v / z;
    }
}

/// `dx = y * (dy - <dy, y>)` for one softmax row.
pub(crate) fn softmax_bwd<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T]) {
    let s = dot(dy, y);
    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(dy) {
        *d = yi * (gi - s);
    }
}

/// Mean cross-entropy over consecutive groups of `classes` logits. Writes
/// `scale * dL/dlogits` into `dlogits`.
pub(crate) fn cross_entropy_fwd_bwd<T: Scalar>(
    logits: &[T],
    classes: usize,
    labels: &[usize],
    scale: T,
    dlogits: &mut [T],
) -> T {
    let groups = labels.len();
    let inv = T::one() / T::from_usize(groups).expect("group count");
    let mut total = T::zero();
    for (g, &label) in labels.iter().enumerate() {
        let row = &logits[g * classes..(g + 1) * classes];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + z.ln();
        total += lse - row[label];
        let d = &mut dlogits[g * classes..(g + 1) * classes];
        for (c, dv) in d.iter_mut().enumerate() {
            let p = (row[c] - lse).exp();
            let target = if c == label { T::one() } else { T::zero() };
            *dv = scale * inv * (p - target);
        }
    }
    total * inv
}

/// Inverted-dropout mask: `0` with probability `rate`, else `1 / (1 - rate)`.
pub(crate) fn dropout_mask<T: Scalar>(n: usize, rate: f64, seed: u64) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `[cin, h, w]` input, `[cout, cin, kh, kw]` kernels, stride 1, zero padding.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, b: &Tensor<T>, padding: usize) -> Result<Tensor<T>> {
    let s = conv_shape(x, k, b, padding)?;
    let (ho, wo) = s.out_hw();
    let mut y = Tensor::zeros(&[s.cout, ho, wo]);
    conv_fwd(s, &x.data, &k.data, &b.data, &mut y.data);
    Ok(y)
}

/// Returns `(dx, dk, db)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    b: &Tensor<T>,
    padding: usize,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let s = conv_shape(x, k, b, padding)?;
    let (ho, wo) = s.out_hw();
    dy.expect_shape("conv2d_backward", &[s.cout, ho, wo])?;
    let mut dx = Tensor::zeros(&x.shape);
    let mut dk = Tensor::zeros(&k.shape);
    let mut db = Tensor::zeros(&b.shape);
    conv_bwd(s, &x.data, &k.data, &dy.data, &mut dk.data, &mut db.data, Some(&mut dx.data));
    Ok((dx, dk, db))
}

fn conv_shape<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, b: &Tensor<T>, pad: usize) -> Result<ConvShape> {
    let bad = |l: &Tensor<T>, r: &Tensor<T>| Error::Shape {
        op: "conv2d",
        left: l.shape.clone(),
        right: r.shape.clone(),
    };
    if x.shape.len() != 3 || k.shape.len() != 4 || k.shape[1] != x.shape[0] {
        return Err(bad(x, k));
    }
    if b.shape != [k.shape[0]] {
        return Err(bad(k, b));
    }
    let s = ConvShape {
        cin: x.shape[0],
        cout: k.shape[0],
        h: x.shape[1],
        w: x.shape[2],
        kh: k.shape[2],
        kw: k.shape[3],
        pad,
    };
    if s.h + 2 * pad < s.kh || s.w + 2 * pad < s.kw {
        return Err(bad(x, k));
    }
    Ok(s)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.grad = None;
    relu_inplace(&mut y.data);
    y
}

pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    dy.expect_shape("relu_backward", &y.shape)?;
    let mut dx = dy.clone();
    relu_bwd_inplace(&y.data, &mut dx.data);
    Ok(dx)
}

/// Applies `W x + b` to the last axis of `x`, `W` stored `[out, in]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, n_in, n_out) = linear_shape(x, w, b)?;
    let mut shape = x.shape.clone();
    *shape.last_mut().expect("rank >= 1") = n_out;
    let mut y = Tensor::zeros(&shape);
    for r in 0..rows {
        linear_fwd(&w.data, &b.data, &x.data[r * n_in..(r + 1) * n_in], &mut y.data[r * n_out..(r + 1) * n_out]);
    }
    Ok(y)
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (rows, n_in, n_out) = linear_shape(x, w, b)?;
    if dy.numel() != rows * n_out {
        return Err(Error::Shape {
            op: "linear_backward",
            left: dy.shape.clone(),
            right: vec![rows, n_out],
        });
    }
    let mut dx = Tensor::zeros(&x.shape);
    let mut dw = Tensor::zeros(&w.shape);
    let mut db = Tensor::zeros(&b.shape);
    for r in 0..rows {
        linear_bwd(
            &w.data,
            &x.data[r * n_in..(r + 1) * n_in],
            &dy.data[r * n_out..(r + 1) * n_out],
            &mut dw.data,
            &mut db.data,
            Some(&mut dx.data[r * n_in..(r + 1) * n_in]),
        );
    }
    Ok((dx, dw, db))
}

fn linear_shape<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let n_in = *x.shape.last().ok_or_else(|| Error::InvalidArgument("linear on a scalar".into()))?;
    if w.shape.len() != 2 || w.shape[1] != n_in || b.shape != [w.shape[0]] {
        return Err(Error::Shape {
            op: "linear",
            left: x.shape.clone(),
            right: w.shape.clone(),
        });
    }
    Ok((x.numel() / n_in.max(1), n_in, w.shape[0]))
}

/// Row-wise softmax of a `[rows, cols]` tensor.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape.len() != 2 {
        return Err(Error::InvalidArgument(format!("softmax_rows needs rank 2, got {:?}", x.shape)));
    }
    let mut y = x.clone();
    y.grad = None;
    for row in y.data.chunks_mut(x.shape[1]) {
        softmax_inplace(row);
    }
    Ok(y)
}

pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    dy.expect_shape("softmax_rows_backward", &y.shape)?;
    let c = y.shape[1];
    let mut dx = Tensor::zeros(&y.shape);
    for ((yr, gr), dr) in y.data.chunks(c).zip(dy.data.chunks(c)).zip(dx.data.chunks_mut(c)) {
        softmax_bwd(yr, gr, dr);
    }
    Ok(dx)
}

/// Returns the output and the applied mask (all ones in evaluation mode).
pub fn dropout<T: Scalar>(x: &Tensor<T>, rate: f64, mode: Mode, seed: u64) -> Result<(Tensor<T>, Vec<T>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    let mask = match mode {
        Mode::Eval => vec![T::one(); x.numel()],
        Mode::Train => dropout_mask(x.numel(), rate, seed),
    };
    let mut y = x.clone();
    y.grad = None;
    y.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= *m);
    Ok((y, mask))
}

pub fn dropout_backward<T: Scalar>(mask: &[T], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    dx.data.iter_mut().zip(mask).for_each(|(v, m)| *v *= *m);
    dx
}

pub fn residual_add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    b.expect_shape("residual_add", &a.shape)?;
    let mut y = a.clone();
    y.grad = None;
    y.data.iter_mut().zip(&b.data).for_each(|(v, w)| *v += *w);
    Ok(y)
}

/// Gradients of both summands equal the output gradient.
pub fn residual_add_backward<T: Scalar>(dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (dy.clone(), dy.clone())
}

/// Mean natural-log cross-entropy of `[groups, classes]` logits and its gradient.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    if logits.shape.len() != 2 || logits.shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::Shape {
            op: "cross_entropy",
            left: logits.shape.clone(),
            right: vec![labels.len()],
        });
    }
    let classes = logits.shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} >= {classes} classes")));
    }
    let mut d = Tensor::zeros(&logits.shape);
    let loss = cross_entropy_fwd_bwd(&logits.data, classes, labels, T::one(), &mut d.data);
    Ok((loss, d))
}
