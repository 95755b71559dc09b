//! Forward and backward kernels for the layer set, on plain tensors.
//!
//! The tape in [`super::tape`] calls these; they are also usable on
//! their own. Batch-parallel kernels reduce per-sample partial results
//! in sample order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Geometry of a 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize; 4],
        weight: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [_, c_in, h, w] = *input;
        let &[c_out, wc_in, kh, kw] = weight else {
            return Err(Error::shape("conv2d", format!("weights must be 4-d, got {weight:?}")));
        };
        if wc_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c_in} channels but weights expect {wc_in}"),
            ));
        }
        if bias != [c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {bias:?} does not match {c_out} output channels"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if kh > ph || kw > pw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}×{kw} larger than padded input {ph}×{pw}"),
            ));
        }
        let out_h = (ph - kh) / stride + 1;
        let out_w = (pw - kw) / stride + 1;
        Ok(Self { c_in, c_out, kh, kw, h, w, stride, padding, out_h, out_w })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one sample (C×H×W) into a (C·Kh·Kw)×(Ho·Wo) patch matrix.
fn im2col<T: Real>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let p = g.out_len();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let dst = &mut cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Fold a patch-matrix gradient back onto one sample, accumulating.
fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let p = g.out_len();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

#[inline]
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
}

/// Cross-correlation of `input` (N×Cin×H×W) with `weight` (Cout×Cin×Kh×Kw) plus bias.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, ConvGeometry)> {
    let dims = input.dims4("conv2d")?;
    let g = ConvGeometry::new(&dims, weight.shape(), bias.shape(), stride, padding)?;
    let n = dims[0];
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.out_len();
    let mut out = vec![T::zero(); n * out_len];
    let (wd, bd) = (weight.data(), bias.data());
    let p = g.out_len();
    let k = g.patch_len();
    out.par_chunks_mut(out_len)
        .zip(input.data().par_chunks(in_len))
        .for_each(|(y, x)| {
            let mut cols = vec![T::zero(); k * p];
            im2col(x, &g, &mut cols);
            for co in 0..g.c_out {
                let yrow = &mut y[co * p..(co + 1) * p];
                yrow.fill(bd[co]);
                let wrow = &wd[co * k..(co + 1) * k];
                for (ki, &wv) in wrow.iter().enumerate() {
                    if wv != T::zero() {
                        axpy(wv, &cols[ki * p..(ki + 1) * p], yrow);
                    }
                }
            }
        });
    Ok((Tensor::new(vec![n, g.c_out, g.out_h, g.out_w], out)?, g))
}

/// Gradients of a convolution with respect to (input, weight, bias).
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &ConvGeometry,
    need_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let n = input.shape()[0];
    let in_len = g.c_in * g.h * g.w;
    let p = g.out_len();
    let k = g.patch_len();
    let out_len = g.c_out * p;
    let wd = weight.data();

    // Per-sample partials: (dx, dW, db).
    let partials: Vec<(Vec<T>, Vec<T>, Vec<T>)> = input
        .data()
        .par_chunks(in_len)
        .zip(grad_out.data().par_chunks(out_len))
        .map(|(x, gy)| {
            let mut cols = vec![T::zero(); k * p];
            im2col(x, g, &mut cols);
            let mut dw = vec![T::zero(); g.c_out * k];
            let mut db = vec![T::zero(); g.c_out];
            for co in 0..g.c_out {
                let grow = &gy[co * p..(co + 1) * p];
                db[co] = grow.iter().copied().sum();
                for ki in 0..k {
                    dw[co * k + ki] = dot(grow, &cols[ki * p..(ki + 1) * p]);
                }
            }
            let mut dx = Vec::new();
            if need_input_grad {
                // Reuse the patch buffer for the patch gradient.
                cols.fill(T::zero());
                for co in 0..g.c_out {
                    let grow = &gy[co * p..(co + 1) * p];
                    for ki in 0..k {
                        let wv = wd[co * k + ki];
                        if wv != T::zero() {
                            axpy(wv, grow, &mut cols[ki * p..(ki + 1) * p]);
                        }
                    }
                }
                dx = vec![T::zero(); in_len];
                col2im(&cols, g, &mut dx);
            }
            (dx, dw, db)
        })
        .collect();

    let mut dw = vec![T::zero(); g.c_out * k];
    let mut db = vec![T::zero(); g.c_out];
    let mut dx = if need_input_grad { Vec::with_capacity(n * in_len) } else { Vec::new() };
    for (pdx, pdw, pdb) in partials {
        axpy(T::one(), &pdw, &mut dw);
        axpy(T::one(), &pdb, &mut db);
        dx.extend_from_slice(&pdx);
    }
    let dx = if need_input_grad { Some(Tensor::new(input.shape().to_vec(), dx)?) } else { None };
    Ok((dx, Tensor::new(weight.shape().to_vec(), dw)?, Tensor::new(vec![g.c_out], db)?))
}

/// 2×2 stride-2 max pooling. Returns the output and, per output element,
/// the flat input index of the window maximum (first in row-major window
/// order on ties).
pub fn maxpool2x2_forward<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = input.dims4("maxpool2d")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2d",
            format!("spatial extent {h}×{w} not divisible by the 2×2 window"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

pub fn maxpool2x2_backward<T: Real>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let mut dx = vec![T::zero(); input_shape.iter().product()];
    for (&i, &gv) in argmax.iter().zip(grad_out.data()) {
        dx[i] = dx[i] + gv;
    }
    Tensor::new(input_shape.to_vec(), dx)
}

pub fn relu_forward<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// N×C×H×W → N×C spatial mean.
pub fn global_avg_pool_forward<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4("global_avg_pool")?;
    let area = h * w;
    let inv = T::of(1.0 / area as f64);
    let out = input
        .data()
        .chunks(area)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward<T: Real>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let area = input_shape[2] * input_shape[3];
    let inv = T::of(1.0 / area as f64);
    let mut dx = Vec::with_capacity(input_shape.iter().product());
    for &g in grad_out.data() {
        dx.extend(std::iter::repeat_n(g * inv, area));
    }
    Tensor::new(input_shape.to_vec(), dx)
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, c] = logits.shape() else {
        return Err(Error::shape("softmax", format!("expected N×C logits, got {:?}", logits.shape())));
    };
    let mut out = Vec::with_capacity(n * c);
    for row in logits.data().chunks(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::new(vec![n, c], out)
}

/// Mean cross-entropy of `labels` under softmax(`logits`). Returns (loss, probabilities).
pub fn softmax_cross_entropy_forward<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let &[n, c] = logits.shape() else {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("expected N×C logits, got {:?}", logits.shape()),
        ));
    };
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
    }
    let probs = softmax(logits)?;
    let mut loss = T::zero();
    for (row, &l) in logits.data().chunks(c).zip(labels) {
        // log-sum-exp form keeps −log p finite even when p underflows.
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        loss = loss + (lse - row[l]);
    }
    Ok((loss / T::of(n as f64), probs))
}

pub fn softmax_cross_entropy_backward<T: Real>(
    probs: &Tensor<T>,
    labels: &[usize],
    grad_loss: T,
) -> Result<Tensor<T>> {
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    let scale = grad_loss / T::of(n as f64);
    let mut d = probs.data().to_vec();
    for (row, &l) in d.chunks_mut(c).zip(labels) {
        row[l] = row[l] - T::one();
        for v in row.iter_mut() {
            *v = *v * scale;
        }
    }
    Tensor::new(vec![n, c], d)
}
