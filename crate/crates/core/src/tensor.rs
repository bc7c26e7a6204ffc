//! Dense row-major `f64` tensors and the small kernel set the model family
//! is built from: cross-correlation conv, rectification, max-pooling with
//! argmax records, L2 normalization, and a stable softmax.
//!
//! Accumulation orders are fixed (documented per kernel) so repeated runs
//! are bit-identical.

use crate::error::{DrmmError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking the shape/data length agreement and that
    /// every scalar is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(DrmmError::shape(
                "Tensor::new",
                format!("{:?} ({} scalars)", shape, n),
                format!("{} scalars", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(DrmmError::InvalidParam(format!(
                "non-finite scalar {} at flat index {}",
                data[i], i
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(DrmmError::shape(
                "Tensor::reshape",
                format!("{:?} ({} scalars)", shape, n),
                format!("{} scalars", self.data.len()),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Flat index of `[y, x, c]` in an `[H, W, C]` tensor.
    pub fn idx3(&self, y: usize, x: usize, c: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (y * self.shape[1] + x) * self.shape[2] + c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    SameZero,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub filter_count: usize,
    pub filter_height: usize,
    pub filter_width: usize,
    pub filter_channels: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stride < 1 {
            return Err(DrmmError::InvalidParam("conv stride must be >= 1".into()));
        }
        if self.filter_height < 1 || self.filter_width < 1 || self.filter_channels < 1 || self.filter_count < 1 {
            return Err(DrmmError::InvalidParam("conv filter extents must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PoolSpec {
    pub window_height: usize,
    pub window_width: usize,
    pub stride: usize,
}

impl PoolSpec {
    pub fn validate(&self) -> Result<()> {
        if self.window_height < 1 || self.window_width < 1 || self.stride < 1 {
            return Err(DrmmError::InvalidParam("pool window/stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// Dot product of two equal-length slices, accumulated left to right.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Cross-correlation (convnet convention, no filter flip).
///
/// `input` is `[H, W, C]`, `bank` is `[F, fh, fw, C]`, `bias` is `[F]`.
/// Each output scalar accumulates as `bias[f]` plus filter-row dot
/// products taken top to bottom, left to right, channels innermost; the
/// nesting never changes, so outputs are bit-reproducible.
pub fn conv2d(input: &Tensor, bank: &Tensor, spec: &ConvSpec, bias: &Tensor) -> Result<Tensor> {
    spec.validate()?;
    let ishape = input.shape();
    if ishape.len() != 3 {
        return Err(DrmmError::shape("conv2d input", "[H, W, C]", format!("{:?}", ishape)));
    }
    let (h, w, c) = (ishape[0], ishape[1], ishape[2]);
    let (f_n, fh, fw, fc) = (
        spec.filter_count,
        spec.filter_height,
        spec.filter_width,
        spec.filter_channels,
    );
    if bank.shape() != [f_n, fh, fw, fc] {
        return Err(DrmmError::shape(
            "conv2d bank",
            format!("{:?}", [f_n, fh, fw, fc]),
            format!("{:?}", bank.shape()),
        ));
    }
    if fc != c {
        return Err(DrmmError::shape(
            "conv2d channels",
            format!("input channels {}", c),
            format!("filter channels {}", fc),
        ));
    }
    if bias.shape() != [f_n] {
        return Err(DrmmError::shape("conv2d bias", format!("[{}]", f_n), format!("{:?}", bias.shape())));
    }

    let s = spec.stride;
    let (out_h, out_w, pad_top, pad_left) = match spec.padding {
        Padding::Valid => {
            if fh > h || fw > w {
                return Err(DrmmError::shape(
                    "conv2d valid padding",
                    format!("input at least {}x{}", fh, fw),
                    format!("{}x{}", h, w),
                ));
            }
            ((h - fh) / s + 1, (w - fw) / s + 1, 0isize, 0isize)
        }
        Padding::SameZero => {
            let out_h = (h + s - 1) / s;
            let out_w = (w + s - 1) / s;
            let pad_h = ((out_h - 1) * s + fh).saturating_sub(h);
            let pad_w = ((out_w - 1) * s + fw).saturating_sub(w);
            (out_h, out_w, (pad_h / 2) as isize, (pad_w / 2) as isize)
        }
    };

    let run = fw * c;
    let mut out = vec![0.0; out_h * out_w * f_n];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let iy0 = (oy * s) as isize - pad_top;
            let ix0 = (ox * s) as isize - pad_left;
            let interior = iy0 >= 0
                && ix0 >= 0
                && iy0 + fh as isize <= h as isize
                && ix0 + fw as isize <= w as isize;
            for f in 0..f_n {
                let mut acc = bias.data()[f];
                if interior {
                    // contiguous filter row against contiguous input row
                    let (iy0, ix0) = (iy0 as usize, ix0 as usize);
                    for ky in 0..fh {
                        let irow = ((iy0 + ky) * w + ix0) * c;
                        let frow = ((f * fh + ky) * fw) * c;
                        let a = &input.data()[irow..irow + run];
                        let b = &bank.data()[frow..frow + run];
                        for i in 0..run {
                            acc += a[i] * b[i];
                        }
                    }
                } else {
                    for ky in 0..fh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..fw {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let ibase = ((iy as usize) * w + ix as usize) * c;
                            let fbase = ((f * fh + ky) * fw + kx) * c;
                            for ch in 0..c {
                                acc += input.data()[ibase + ch] * bank.data()[fbase + ch];
                            }
                        }
                    }
                }
                out[(oy * out_w + ox) * f_n + f] = acc;
            }
        }
    }
    Tensor::new(vec![out_h, out_w, f_n], out)
}

/// Elementwise `max(u, 0)`.
pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor { shape: input.shape().to_vec(), data }
}

/// Max-pooling over `[H, W, C]`. Returns per-output values and the flat
/// within-window offset (`wy * window_width + wx`) of the first maximizer
/// in row-major scan order; ties keep the lowest offset.
pub fn maxpool_argmax(input: &Tensor, spec: &PoolSpec) -> Result<(Tensor, Vec<usize>)> {
    spec.validate()?;
    let ishape = input.shape();
    if ishape.len() != 3 {
        return Err(DrmmError::shape("maxpool input", "[H, W, C]", format!("{:?}", ishape)));
    }
    let (h, w, c) = (ishape[0], ishape[1], ishape[2]);
    let (wh, ww, s) = (spec.window_height, spec.window_width, spec.stride);
    if wh > h || ww > w {
        return Err(DrmmError::shape(
            "maxpool window",
            format!("input at least {}x{}", wh, ww),
            format!("{}x{}", h, w),
        ));
    }
    let out_h = (h - wh) / s + 1;
    let out_w = (w - ww) / s + 1;
    let mut values = vec![0.0; out_h * out_w * c];
    let mut argmax = vec![0usize; out_h * out_w * c];
    for oy in 0..out_h {
        for ox in 0..out_w {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_off = 0usize;
                for wy in 0..wh {
                    for wx in 0..ww {
                        let v = input.data()[((oy * s + wy) * w + (ox * s + wx)) * c + ch];
                        if v > best {
                            best = v;
                            best_off = wy * ww + wx;
                        }
                    }
                }
                let o = (oy * out_w + ox) * c + ch;
                values[o] = best;
                argmax[o] = best_off;
            }
        }
    }
    Ok((Tensor::new(vec![out_h, out_w, c], values)?, argmax))
}

/// `input / ||input||_2`; rejects the all-zero tensor rather than dividing
/// by zero.
pub fn normalize_l2(input: &Tensor) -> Result<Tensor> {
    let norm = dot(input.data(), input.data()).sqrt();
    if norm == 0.0 {
        return Err(DrmmError::DegenerateInput("normalize_l2 of an all-zero tensor".into()));
    }
    let data = input.data().iter().map(|v| v / norm).collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Softmax along `axis`, computed with max-subtraction per lane.
pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = input.shape();
    if axis >= shape.len() {
        return Err(DrmmError::InvalidParam(format!(
            "softmax axis {} out of range for shape {:?}",
            axis, shape
        )));
    }
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; input.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut m = f64::NEG_INFINITY;
            for k in 0..axis_len {
                m = m.max(input.data()[base + k * inner]);
            }
            let mut z = 0.0;
            for k in 0..axis_len {
                let e = (input.data()[base + k * inner] - m).exp();
                out[base + k * inner] = e;
                z += e;
            }
            for k in 0..axis_len {
                out[base + k * inner] /= z;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Softmax of a flat slice (single lane); used for class posteriors.
pub fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}
