//! Numeric kernels: direct convolution, max pooling, channel concatenation,
//! ReLU and row-wise softmax. All kernels take NCHW tensors and return new ones.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Geometry of a 2-D convolution. Weights live in the [`WeightStore`](crate::model_io::WeightStore)
/// with shape `(out_channels, in_channels, kh, kw)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvSpec {
            out_channels,
            kernel: (kernel, kernel),
            stride,
            pad,
            bias: true,
        }
    }

    /// Spatial size after the convolution (floor rounding).
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(Error::geometry("conv2d", "zero kernel extent or stride"));
        }
        let extent = |input: usize, k: usize| {
            let span = input + 2 * self.pad;
            if span < k {
                Err(Error::geometry(
                    "conv2d",
                    format!("kernel {k} larger than padded input {span}"),
                ))
            } else {
                Ok((span - k) / self.stride + 1)
            }
        };
        Ok((extent(h, self.kernel.0)?, extent(w, self.kernel.1)?))
    }

    pub fn weight_len(&self, in_channels: usize) -> usize {
        self.out_channels * in_channels * self.kernel.0 * self.kernel.1
    }

    pub fn param_count(&self, in_channels: usize) -> usize {
        self.weight_len(in_channels) + if self.bias { self.out_channels } else { 0 }
    }

    /// Multiply-accumulates for one image whose output is `out_h x out_w`.
    pub fn mac_count(&self, in_channels: usize, out_h: usize, out_w: usize) -> u64 {
        (out_h * out_w) as u64 * self.weight_len(in_channels) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rounding {
    Ceil,
    Floor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub rounding: Rounding,
}

impl PoolSpec {
    pub fn new(kernel: usize, stride: usize, rounding: Rounding) -> Self {
        PoolSpec {
            kernel: (kernel, kernel),
            stride,
            rounding,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(Error::geometry("maxpool2d", "zero kernel extent or stride"));
        }
        Ok((
            pool_extent(h, self.kernel.0, self.stride, self.rounding)?,
            pool_extent(w, self.kernel.1, self.stride, self.rounding)?,
        ))
    }
}

fn pool_extent(input: usize, k: usize, stride: usize, rounding: Rounding) -> Result<usize> {
    let span = input as i64 - k as i64;
    let s = stride as i64;
    let steps = match rounding {
        Rounding::Floor => span.div_euclid(s),
        Rounding::Ceil => -(-span).div_euclid(s),
    };
    let mut out = steps + 1;
    // The last window has to start inside the input, otherwise it is dropped.
    if out > 0 && (out - 1) * s >= input as i64 {
        out -= 1;
    }
    if out < 1 {
        return Err(Error::geometry(
            "maxpool2d",
            format!("window {k} stride {stride} leaves no output for extent {input}"),
        ));
    }
    Ok(out as usize)
}

/// Direct convolution with zero padding. `weights` is `(out, in, kh, kw)` row-major.
///
/// Output channels are computed in parallel; each output element is accumulated by a
/// single task in a fixed order, so results do not depend on the thread count.
pub fn conv2d(
    input: &Tensor,
    spec: &ConvSpec,
    weights: &[f32],
    bias: Option<&[f32]>,
) -> Result<Tensor> {
    let s = input.shape();
    let (kh, kw) = spec.kernel;
    let oc = spec.out_channels;
    if oc == 0 {
        return Err(Error::shape("conv2d", "zero output channels"));
    }
    if weights.len() != spec.weight_len(s.c) {
        let per_in = oc * kh * kw;
        return Err(Error::shape(
            "conv2d",
            if per_in > 0 && weights.len().is_multiple_of(per_in) {
                format!(
                    "input has {} channels but weights expect {}",
                    s.c,
                    weights.len() / per_in
                )
            } else {
                format!(
                    "{} weights do not fit {oc}x{}x{kh}x{kw}",
                    weights.len(),
                    s.c
                )
            },
        ));
    }
    match (spec.bias, bias) {
        (true, Some(b)) if b.len() == oc => {}
        (true, Some(b)) => {
            return Err(Error::shape(
                "conv2d",
                format!("{} bias values for {oc} filters", b.len()),
            ))
        }
        (true, None) => return Err(Error::shape("conv2d", "bias expected but not given")),
        (false, Some(_)) => return Err(Error::shape("conv2d", "bias given for bias-free conv")),
        (false, None) => {}
    }
    let (oh, ow) = spec.output_hw(s.h, s.w)?;
    let out_shape = Shape::new(s.n, oc, oh, ow);
    let mut out = vec![0.0f32; out_shape.len()];
    let (h, w, stride, pad) = (s.h, s.w, spec.stride, spec.pad);
    let in_c = s.c;

    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(idx, out_plane)| {
            let (n, o) = (idx / oc, idx % oc);
            if let Some(b) = bias {
                out_plane.fill(b[o]);
            }
            for ic in 0..in_c {
                let in_plane = input.plane(n, ic);
                let kernel = &weights[(o * in_c + ic) * kh * kw..(o * in_c + ic + 1) * kh * kw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = kernel[ky * kw + kx];
                        // Output columns whose input column ox*stride + kx - pad lands inside [0, w).
                        let ox_lo = if pad > kx {
                            (pad - kx).div_ceil(stride)
                        } else {
                            0
                        };
                        let ox_hi = if w + pad > kx {
                            ((w + pad - kx - 1) / stride + 1).min(ow)
                        } else {
                            0
                        };
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            let in_row = &in_plane[iy as usize * w..(iy as usize + 1) * w];
                            let out_row = &mut out_plane[oy * ow + ox_lo..oy * ow + ox_hi];
                            let ix0 = ox_lo * stride + kx - pad;
                            if stride == 1 {
                                for (o_v, &i_v) in out_row.iter_mut().zip(&in_row[ix0..]) {
                                    *o_v += wv * i_v;
                                }
                            } else {
                                for (o_v, &i_v) in
                                    out_row.iter_mut().zip(in_row[ix0..].iter().step_by(stride))
                                {
                                    *o_v += wv * i_v;
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor::new(out_shape, out)
}

/// Max pooling without padding; windows that run past the border are clipped.
pub fn maxpool2d(input: &Tensor, spec: &PoolSpec) -> Result<Tensor> {
    let s = input.shape();
    let (oh, ow) = spec.output_hw(s.h, s.w)?;
    let (kh, kw) = spec.kernel;
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let mut out = Vec::with_capacity(out_shape.len());
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = input.plane(n, c);
            for oy in 0..oh {
                let y0 = oy * spec.stride;
                let y1 = (y0 + kh).min(s.h);
                for ox in 0..ow {
                    let x0 = ox * spec.stride;
                    let x1 = (x0 + kw).min(s.w);
                    let mut m = f32::NEG_INFINITY;
                    for y in y0..y1 {
                        for &v in &plane[y * s.w + x0..y * s.w + x1] {
                            m = m.max(v);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Concatenates along the channel axis, parts in argument order.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?
        .shape();
    for p in &parts[1..] {
        let s = p.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape(
                "concat_channels",
                format!("cannot join {s} with {first}"),
            ));
        }
    }
    let channels: usize = parts.iter().map(|p| p.shape().c).sum();
    let out_shape = Shape::new(first.n, channels, first.h, first.w);
    let mut data = Vec::with_capacity(out_shape.len());
    for n in 0..first.n {
        for p in parts {
            data.extend_from_slice(p.item(n));
        }
    }
    Tensor::new(out_shape, data)
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    relu_inplace(&mut out);
    out
}

pub fn relu_inplace(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = v.max(0.0);
    }
}

/// Softmax over each row of a row-major `rows x cols` score matrix.
pub fn softmax_rows(scores: &[f32], cols: usize) -> Vec<f32> {
    assert!(
        cols > 0 && scores.len().is_multiple_of(cols),
        "ragged score matrix"
    );
    let mut out = vec![0.0f32; scores.len()];
    for (row, dst) in scores.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&x| ((x - max) as f64).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (d, e) in dst.iter_mut().zip(&exps) {
            *d = (e / sum) as f32;
        }
    }
    out
}
