//! Standard neural building blocks on rank-3 feature tensors (C, H, W).
//!
//! Determinism contract: every output element is produced by exactly one
//! worker, accumulating its terms in a fixed sequential order (channel-major,
//! then kernel row, then kernel column for convolutions). Parallelism only
//! splits work across independent output elements, so results are identical
//! for any thread count, and identical to the naive reference kernels in
//! [`crate::reference`].

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

/// Validates conv2d argument shapes and computes the output extents.
fn conv2d_dims<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    input.expect_rank(3, "conv2d input")?;
    kernel.expect_rank(4, "conv2d kernel")?;
    bias.expect_rank(1, "conv2d bias")?;
    if stride == 0 {
        return Err(Error::config("conv2d stride must be >= 1"));
    }
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cout, kcin, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if kcin != cin {
        return Err(Error::shape(format!(
            "conv2d: kernel expects {kcin} input channels, input has {cin}"
        )));
    }
    if bias.shape()[0] != cout {
        return Err(Error::shape(format!(
            "conv2d: bias length {} != output channels {cout}",
            bias.shape()[0]
        )));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    Ok(ConvDims {
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh,
        ow,
    })
}

/// 2-D convolution with zero padding.
///
/// Output spatial size is `floor((H + 2*padding - kh)/stride) + 1` (same for
/// W). Per output element the reduction runs over (ci, kh, kw) in that order
/// with the bias added last; the loop structure below only reorders *which*
/// element is touched when, never the order of terms within one element, so
/// the result is bit-identical to `reference::conv2d_naive`.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    let ConvDims {
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh: oh_n,
        ow: ow_n,
    } = conv2d_dims(input, kernel, bias, stride, padding)?;
    let mut out = Tensor::zeros(&[cout, oh_n, ow_n]);
    let in_data = input.data();
    let k_data = kernel.data();
    let b_data = bias.data();

    out.data_mut()
        .par_chunks_mut(oh_n * ow_n)
        .enumerate()
        .for_each(|(co, out_plane)| {
            for ci in 0..cin {
                let in_plane = &in_data[ci * h * w..(ci + 1) * h * w];
                for kh_i in 0..kh {
                    // valid rows: 0 <= oh*stride + kh_i - padding <= h-1
                    let a = padding as i64 - kh_i as i64;
                    let oh_start = if a > 0 {
                        ((a + stride as i64 - 1) / stride as i64) as usize
                    } else {
                        0
                    };
                    let hi = h as i64 - 1 + a;
                    if hi < 0 {
                        continue;
                    }
                    let oh_end = (((hi / stride as i64) as usize) + 1).min(oh_n);
                    for kw_i in 0..kw {
                        let wgt = k_data[((co * cin + ci) * kh + kh_i) * kw + kw_i];
                        let b = padding as i64 - kw_i as i64;
                        let ow_start = if b > 0 {
                            ((b + stride as i64 - 1) / stride as i64) as usize
                        } else {
                            0
                        };
                        let wi = w as i64 - 1 + b;
                        if wi < 0 {
                            continue;
                        }
                        let ow_end = (((wi / stride as i64) as usize) + 1).min(ow_n);
                        if ow_start >= ow_end {
                            continue;
                        }
                        for oh in oh_start..oh_end {
                            let ih = oh * stride + kh_i - padding;
                            let in_row = &in_plane[ih * w..ih * w + w];
                            let out_row = &mut out_plane[oh * ow_n..oh * ow_n + ow_n];
                            if stride == 1 {
                                let iw0 = ow_start + kw_i - padding;
                                let src = &in_row[iw0..iw0 + (ow_end - ow_start)];
                                for (o, &x) in out_row[ow_start..ow_end].iter_mut().zip(src) {
                                    *o += wgt * x;
                                }
                            } else {
                                for ow in ow_start..ow_end {
                                    out_row[ow] += wgt * in_row[ow * stride + kw_i - padding];
                                }
                            }
                        }
                    }
                }
            }
            let b = b_data[co];
            for v in out_plane.iter_mut() {
                *v += b;
            }
        });
    Ok(out)
}

/// Elementwise `max(x, slope*x)`.
pub fn leaky_relu<S: Scalar>(x: &Tensor<S>, slope: S) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { slope * v })
}

/// conv -> leaky_relu -> conv -> add skip. Kernels must be square,
/// channel-preserving, with padding (k-1)/2 so the shape is preserved.
pub fn residual_block<S: Scalar>(
    input: &Tensor<S>,
    w1: &Tensor<S>,
    b1: &Tensor<S>,
    w2: &Tensor<S>,
    b2: &Tensor<S>,
    slope: S,
) -> Result<Tensor<S>> {
    input.expect_rank(3, "residual_block input")?;
    for (name, w) in [("w1", w1), ("w2", w2)] {
        w.expect_rank(4, "residual_block kernel")?;
        let c = input.shape()[0];
        if w.shape()[0] != c || w.shape()[1] != c {
            return Err(Error::shape(format!(
                "residual_block {name}: expected channel-preserving {c}->{c}, got {:?}",
                w.shape()
            )));
        }
        if w.shape()[2] != w.shape()[3] || w.shape()[2] % 2 == 0 {
            return Err(Error::shape(format!(
                "residual_block {name}: kernels must be square and odd, got {:?}",
                w.shape()
            )));
        }
    }
    let pad = (w1.shape()[2] - 1) / 2;
    let y = conv2d(input, w1, b1, 1, pad)?;
    let y = leaky_relu(&y, slope);
    let pad2 = (w2.shape()[2] - 1) / 2;
    let y = conv2d(&y, w2, b2, 1, pad2)?;
    add(input, &y)
}

/// 2x2 average pooling with stride 2; odd extents replicate the last
/// row/column. Output extents are ceil(H/2), ceil(W/2).
pub fn avg_pool2<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    input.expect_rank(3, "avg_pool2 input")?;
    let (c_n, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh_n, ow_n) = (h.div_ceil(2), w.div_ceil(2));
    let quarter = S::from_f64(0.25);
    let mut out = Tensor::zeros(&[c_n, oh_n, ow_n]);
    let in_data = input.data();
    out.data_mut()
        .par_chunks_mut(oh_n * ow_n)
        .enumerate()
        .for_each(|(c, out_plane)| {
            let plane = &in_data[c * h * w..(c + 1) * h * w];
            for oh in 0..oh_n {
                let r0 = 2 * oh;
                let r1 = (2 * oh + 1).min(h - 1);
                for ow in 0..ow_n {
                    let c0 = 2 * ow;
                    let c1 = (2 * ow + 1).min(w - 1);
                    // raster-order sum, then an exact *0.25
                    let mut acc = plane[r0 * w + c0];
                    acc += plane[r0 * w + c1];
                    acc += plane[r1 * w + c0];
                    acc += plane[r1 * w + c1];
                    out_plane[oh * ow_n + ow] = acc * quarter;
                }
            }
        });
    Ok(out)
}

/// Depth-to-space: (C*r^2, H, W) -> (C, r*H, r*W) with
/// `out[c, h*r+i, w*r+j] = in[(c*r + i)*r + j, h, w]`.
pub fn pixel_shuffle<S: Scalar>(input: &Tensor<S>, r: usize) -> Result<Tensor<S>> {
    input.expect_rank(3, "pixel_shuffle input")?;
    if r == 0 {
        return Err(Error::config("pixel_shuffle factor must be >= 1"));
    }
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if c_in % (r * r) != 0 {
        return Err(Error::shape(format!(
            "pixel_shuffle: {c_in} channels not divisible by r^2 = {}",
            r * r
        )));
    }
    let c_out = c_in / (r * r);
    let mut out = Tensor::zeros(&[c_out, h * r, w * r]);
    for c in 0..c_out {
        for i in 0..r {
            for j in 0..r {
                let src_c = (c * r + i) * r + j;
                for hh in 0..h {
                    let src_row = input.row3(src_c, hh);
                    let dst_base = out.offset3(c, hh * r + i, j);
                    let dst = out.data_mut();
                    for ww in 0..w {
                        dst[dst_base + ww * r] = src_row[ww];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Space-to-depth, the exact inverse of [`pixel_shuffle`].
pub fn space_to_depth<S: Scalar>(input: &Tensor<S>, r: usize) -> Result<Tensor<S>> {
    input.expect_rank(3, "space_to_depth input")?;
    if r == 0 {
        return Err(Error::config("space_to_depth factor must be >= 1"));
    }
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if h % r != 0 || w % r != 0 {
        return Err(Error::shape(format!(
            "space_to_depth: spatial extents {h}x{w} not divisible by {r}"
        )));
    }
    let (oh, ow) = (h / r, w / r);
    let mut out = Tensor::zeros(&[c_in * r * r, oh, ow]);
    for c in 0..c_in {
        for i in 0..r {
            for j in 0..r {
                let dst_c = (c * r + i) * r + j;
                for hh in 0..oh {
                    let src_base = input.offset3(c, hh * r + i, j);
                    let src = input.data();
                    let dst_base = out.offset3(dst_c, hh, 0);
                    for ww in 0..ow {
                        out.data_mut()[dst_base + ww] = src[src_base + ww * r];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Channel concatenation of maps with equal spatial extents.
pub fn concat_channels<S: Scalar>(inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
    if inputs.is_empty() {
        return Err(Error::contract("concat_channels: empty input list"));
    }
    let (h, w) = (inputs[0].shape()[1], inputs[0].shape()[2]);
    let mut c_total = 0;
    for t in inputs {
        t.expect_rank(3, "concat_channels input")?;
        if t.shape()[1] != h || t.shape()[2] != w {
            return Err(Error::shape(format!(
                "concat_channels: spatial mismatch {:?} vs {h}x{w}",
                t.shape()
            )));
        }
        c_total += t.shape()[0];
    }
    let mut data = Vec::with_capacity(c_total * h * w);
    for t in inputs {
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![c_total, h, w], data)
}

/// Per-axis sample positions for a 2x bilinear upsample, align-corners=false:
/// output i samples source coordinate (i + 0.5)/2 - 0.5, edge-clamped.
pub(crate) fn bilinear2_axis<S: Scalar>(n: usize) -> Vec<(usize, usize, S)> {
    (0..2 * n)
        .map(|i| {
            let s = 0.5 * i as f64 - 0.25;
            if s <= 0.0 {
                (0, 0, S::zero())
            } else {
                let i0 = (s.floor() as usize).min(n - 1);
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, S::from_f64(s - i0 as f64))
            }
        })
        .collect()
}

/// 2x bilinear upsample, align-corners=false convention, edge-clamped.
pub fn bilinear_upsample2<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    input.expect_rank(3, "bilinear_upsample2 input")?;
    let (c_n, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let rows = bilinear2_axis::<S>(h);
    let cols = bilinear2_axis::<S>(w);
    let one = S::one();
    let mut out = Tensor::zeros(&[c_n, 2 * h, 2 * w]);
    let in_data = input.data();
    out.data_mut()
        .par_chunks_mut(4 * h * w)
        .enumerate()
        .for_each(|(c, out_plane)| {
            let plane = &in_data[c * h * w..(c + 1) * h * w];
            for (oh, &(y0, y1, ty)) in rows.iter().enumerate() {
                let row0 = &plane[y0 * w..y0 * w + w];
                let row1 = &plane[y1 * w..y1 * w + w];
                let out_row = &mut out_plane[oh * 2 * w..(oh + 1) * 2 * w];
                for (ow, &(x0, x1, tx)) in cols.iter().enumerate() {
                    let top = (one - tx) * row0[x0] + tx * row0[x1];
                    let bot = (one - tx) * row1[x0] + tx * row1[x1];
                    out_row[ow] = (one - ty) * top + ty * bot;
                }
            }
        });
    Ok(out)
}

/// Two chained 2x bilinear upsamples; the library's x4 convention.
pub fn bilinear_upsample_x4<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    bilinear_upsample2(&bilinear_upsample2(input)?)
}

/// Per-position softmax across the channel axis of a (C, H, W) tensor.
pub fn softmax_channels<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    input.expect_rank(3, "softmax_channels input")?;
    let (c_n, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let hw = h * w;
    let mut out = input.clone();
    let data = out.data_mut();
    for p in 0..hw {
        let mut m = data[p];
        for c in 1..c_n {
            let v = data[c * hw + p];
            if v > m {
                m = v;
            }
        }
        let mut sum = S::zero();
        for c in 0..c_n {
            let e = (data[c * hw + p] - m).exp();
            data[c * hw + p] = e;
            sum += e;
        }
        for c in 0..c_n {
            data[c * hw + p] /= sum;
        }
    }
    Ok(out)
}

/// Elementwise logistic sigmoid.
pub fn sigmoid<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| S::one() / (S::one() + (-v).exp()))
}

fn expect_same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    expect_same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn sub<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    expect_same_shape(a, b, "sub")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    expect_same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn scale<S: Scalar>(x: &Tensor<S>, k: S) -> Tensor<S> {
    x.map(|v| k * v)
}

/// Sum of all elements, as a 1-element tensor.
pub fn sum_all<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let mut acc = S::zero();
    for &v in x.data() {
        acc += v;
    }
    Tensor::scalar(acc)
}

/// Channel plane `c` of a (C, H, W) tensor as a rank-2 (H, W) tensor.
pub fn slice_channel<S: Scalar>(x: &Tensor<S>, c: usize) -> Result<Tensor<S>> {
    x.expect_rank(3, "slice_channel input")?;
    let (c_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if c >= c_n {
        return Err(Error::shape(format!(
            "slice_channel: index {c} out of {c_n} channels"
        )));
    }
    Tensor::new(vec![h, w], x.data()[c * h * w..(c + 1) * h * w].to_vec())
}

/// Multiply every channel of a (C, H, W) tensor by a per-position (H, W) map.
pub fn scale_by_map<S: Scalar>(x: &Tensor<S>, map: &Tensor<S>) -> Result<Tensor<S>> {
    x.expect_rank(3, "scale_by_map input")?;
    map.expect_rank(2, "scale_by_map weights")?;
    let (c_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if map.shape() != [h, w] {
        return Err(Error::shape(format!(
            "scale_by_map: map {:?} does not match spatial extents {h}x{w}",
            map.shape()
        )));
    }
    let mut out = x.clone();
    let hw = h * w;
    for c in 0..c_n {
        for (o, &m) in out.data_mut()[c * hw..(c + 1) * hw]
            .iter_mut()
            .zip(map.data())
        {
            *o *= m;
        }
    }
    Ok(out)
}
