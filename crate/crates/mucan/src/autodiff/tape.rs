//! Reverse-mode differentiation tape over the crate's op set.
//!
//! Forward calls go through [`Tape`] methods which evaluate the pure kernels
//! and, while recording, push one record per application: op name, input
//! value ids, output value id, and a backward rule closing over the saved
//! forward context (indices, strides, masks). [`Tape::backward`] walks the
//! records in reverse, accumulating gradients; selection indices (top-K,
//! nonlocal matches) are captured as constants, so gradients flow only
//! through the gathered values.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::loss;
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tmcam;

/// Handle to a value stored on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

/// Context handed to a backward rule.
pub struct BackwardCtx<'a, S: Scalar> {
    values: &'a [Tensor<S>],
    inputs: &'a [ValueId],
    output: ValueId,
    grad_out: &'a Tensor<S>,
}

impl<'a, S: Scalar> BackwardCtx<'a, S> {
    pub fn input(&self, i: usize) -> &Tensor<S> {
        &self.values[self.inputs[i].0]
    }

    pub fn output(&self) -> &Tensor<S> {
        &self.values[self.output.0]
    }

    pub fn grad_out(&self) -> &Tensor<S> {
        self.grad_out
    }
}

type BackwardFn<S> = Box<dyn Fn(&BackwardCtx<S>) -> Vec<Tensor<S>> + Send + Sync>;

struct Record<S: Scalar> {
    #[allow(dead_code)]
    name: &'static str,
    inputs: Vec<ValueId>,
    output: ValueId,
    backward: BackwardFn<S>,
}

/// Gradient map returned by [`Tape::backward`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: ValueId) -> Option<Tensor<S>> {
        self.grads[id.0].take()
    }
}

/// Recording tape. Single-writer during forward; backward is a single
/// reverse sweep that may parallelize inside each op's gradient kernel.
pub struct Tape<S: Scalar> {
    values: Vec<Tensor<S>>,
    is_leaf: Vec<bool>,
    records: Vec<Record<S>>,
    recording: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<S: Scalar>(dst: &mut Tensor<S>, src: &Tensor<S>) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            is_leaf: Vec::new(),
            records: Vec::new(),
            recording: true,
        }
    }

    /// Forward-only tape: values are stored (later ops need them) but no
    /// backward rules are kept.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<S> {
        &self.values[id.0]
    }

    /// Registers an input or parameter tensor.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> ValueId {
        self.values.push(tensor);
        self.is_leaf.push(true);
        ValueId(self.values.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        inputs: Vec<ValueId>,
        output: Tensor<S>,
        backward: impl Fn(&BackwardCtx<S>) -> Vec<Tensor<S>> + Send + Sync + 'static,
    ) -> ValueId {
        self.values.push(output);
        self.is_leaf.push(false);
        let id = ValueId(self.values.len() - 1);
        if self.recording {
            self.records.push(Record {
                name,
                inputs,
                output: id,
                backward: Box::new(backward),
            });
        }
        id
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every reached
    /// value; unreached leaves get zero gradients.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<S>> {
        if !self.values[loss.0].is_scalar() {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.values.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::one()));
        for rec in self.records.iter().rev() {
            let Some(gout) = grads[rec.output.0].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                values: &self.values,
                inputs: &rec.inputs,
                output: rec.output,
                grad_out: &gout,
            };
            let input_grads = (rec.backward)(&ctx);
            debug_assert_eq!(input_grads.len(), rec.inputs.len());
            for (id, g) in rec.inputs.iter().zip(input_grads) {
                match &mut grads[id.0] {
                    Some(existing) => accumulate(existing, &g),
                    slot => *slot = Some(g),
                }
            }
        }
        for (i, slot) in grads.iter_mut().enumerate() {
            if self.is_leaf[i] && slot.is_none() {
                *slot = Some(Tensor::zeros(self.values[i].shape()));
            }
        }
        Ok(Gradients { grads })
    }

    // ---- primitive ops -------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: ValueId,
        kernel: ValueId,
        bias: ValueId,
        stride: usize,
        padding: usize,
    ) -> Result<ValueId> {
        let out = ops::conv2d(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            stride,
            padding,
        )?;
        Ok(self.push(
            "conv2d",
            vec![input, kernel, bias],
            out,
            move |ctx| {
                let (gi, gk, gb) =
                    conv2d_backward(ctx.input(0), ctx.input(1), ctx.grad_out(), stride, padding);
                vec![gi, gk, gb]
            },
        ))
    }

    pub fn leaky_relu(&mut self, x: ValueId, slope: S) -> ValueId {
        let out = ops::leaky_relu(self.value(x), slope);
        self.push("leaky_relu", vec![x], out, move |ctx| {
            let x = ctx.input(0);
            let g = ctx.grad_out();
            let data = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, &gv)| if v > S::zero() { gv } else { slope * gv })
                .collect();
            vec![Tensor::new(x.shape().to_vec(), data).expect("same shape")]
        })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push("add", vec![a, b], out, |ctx| {
            vec![ctx.grad_out().clone(), ctx.grad_out().clone()]
        }))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push("sub", vec![a, b], out, |ctx| {
            vec![ctx.grad_out().clone(), ctx.grad_out().map(|v| -v)]
        }))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push("mul", vec![a, b], out, |ctx| {
            let ga = ops::mul(ctx.grad_out(), ctx.input(1)).expect("same shape");
            let gb = ops::mul(ctx.grad_out(), ctx.input(0)).expect("same shape");
            vec![ga, gb]
        }))
    }

    pub fn scale(&mut self, x: ValueId, k: S) -> ValueId {
        let out = ops::scale(self.value(x), k);
        self.push("scale", vec![x], out, move |ctx| {
            vec![ops::scale(ctx.grad_out(), k)]
        })
    }

    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let out = ops::sum_all(self.value(x));
        self.push("sum_all", vec![x], out, |ctx| {
            let g = ctx.grad_out().data()[0];
            vec![Tensor::full(ctx.input(0).shape(), g)]
        })
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let out = ops::sigmoid(self.value(x));
        self.push("sigmoid", vec![x], out, |ctx| {
            let y = ctx.output();
            let data = y
                .data()
                .iter()
                .zip(ctx.grad_out().data())
                .map(|(&s, &g)| g * s * (S::one() - s))
                .collect();
            vec![Tensor::new(y.shape().to_vec(), data).expect("same shape")]
        })
    }

    pub fn softmax_channels(&mut self, x: ValueId) -> Result<ValueId> {
        let out = ops::softmax_channels(self.value(x))?;
        Ok(self.push("softmax_channels", vec![x], out, |ctx| {
            let y = ctx.output();
            let g = ctx.grad_out();
            let (c_n, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2]);
            let hw = h * w;
            let mut gi = Tensor::zeros(y.shape());
            for p in 0..hw {
                let mut dot = S::zero();
                for c in 0..c_n {
                    dot += g.data()[c * hw + p] * y.data()[c * hw + p];
                }
                for c in 0..c_n {
                    gi.data_mut()[c * hw + p] =
                        y.data()[c * hw + p] * (g.data()[c * hw + p] - dot);
                }
            }
            vec![gi]
        }))
    }

    pub fn avg_pool2(&mut self, x: ValueId) -> Result<ValueId> {
        let out = ops::avg_pool2(self.value(x))?;
        Ok(self.push("avg_pool2", vec![x], out, |ctx| {
            vec![avg_pool2_backward(ctx.input(0).shape(), ctx.grad_out())]
        }))
    }

    pub fn pixel_shuffle(&mut self, x: ValueId, r: usize) -> Result<ValueId> {
        let out = ops::pixel_shuffle(self.value(x), r)?;
        Ok(self.push("pixel_shuffle", vec![x], out, move |ctx| {
            vec![ops::space_to_depth(ctx.grad_out(), r).expect("inverse of forward")]
        }))
    }

    pub fn bilinear_upsample2(&mut self, x: ValueId) -> Result<ValueId> {
        let out = ops::bilinear_upsample2(self.value(x))?;
        Ok(self.push("bilinear_upsample2", vec![x], out, |ctx| {
            vec![bilinear_upsample2_backward(
                ctx.input(0).shape(),
                ctx.grad_out(),
            )]
        }))
    }

    pub fn concat_channels(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        let tensors: Vec<&Tensor<S>> = xs.iter().map(|&id| self.value(id)).collect();
        let out = ops::concat_channels(&tensors)?;
        let ids = xs.to_vec();
        Ok(self.push("concat_channels", ids, out, |ctx| {
            let g = ctx.grad_out();
            let (h, w) = (g.shape()[1], g.shape()[2]);
            let hw = h * w;
            let mut grads = Vec::with_capacity(ctx.inputs.len());
            let mut start = 0;
            for i in 0..ctx.inputs.len() {
                let c = ctx.input(i).shape()[0];
                let data = g.data()[start * hw..(start + c) * hw].to_vec();
                grads.push(Tensor::new(vec![c, h, w], data).expect("slice"));
                start += c;
            }
            grads
        }))
    }

    /// Interior crop of a (C, H, W) tensor: drops `margin` pixels on every
    /// spatial side. Backward scatters the gradient back into the interior.
    pub fn crop_spatial(&mut self, x: ValueId, margin: usize) -> Result<ValueId> {
        let t = self.value(x);
        t.expect_rank(3, "crop_spatial input")?;
        let (c_n, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        if h <= 2 * margin || w <= 2 * margin {
            return Err(Error::shape(format!(
                "crop_spatial: margin {margin} leaves no interior of {h}x{w}"
            )));
        }
        let (oh, ow) = (h - 2 * margin, w - 2 * margin);
        let mut out = Tensor::zeros(&[c_n, oh, ow]);
        for c in 0..c_n {
            for r in 0..oh {
                let src = t.offset3(c, r + margin, margin);
                let dst = (c * oh + r) * ow;
                let row = &t.data()[src..src + ow];
                out.data_mut()[dst..dst + ow].copy_from_slice(row);
            }
        }
        Ok(self.push("crop_spatial", vec![x], out, move |ctx| {
            let xs = ctx.input(0).shape();
            let (c_n, h, w) = (xs[0], xs[1], xs[2]);
            let g = ctx.grad_out();
            let (oh, ow) = (g.shape()[1], g.shape()[2]);
            let mut gi = Tensor::zeros(xs);
            for c in 0..c_n {
                for r in 0..oh {
                    let dst = (c * h + r + margin) * w + margin;
                    let src = (c * oh + r) * ow;
                    gi.data_mut()[dst..dst + ow]
                        .copy_from_slice(&g.data()[src..src + ow]);
                }
            }
            vec![gi]
        }))
    }

    pub fn slice_channel(&mut self, x: ValueId, c: usize) -> Result<ValueId> {
        let out = ops::slice_channel(self.value(x), c)?;
        Ok(self.push("slice_channel", vec![x], out, move |ctx| {
            let xs = ctx.input(0).shape();
            let mut gi = Tensor::zeros(xs);
            let hw = xs[1] * xs[2];
            gi.data_mut()[c * hw..(c + 1) * hw].copy_from_slice(ctx.grad_out().data());
            vec![gi]
        }))
    }

    pub fn scale_by_map(&mut self, x: ValueId, map: ValueId) -> Result<ValueId> {
        let out = ops::scale_by_map(self.value(x), self.value(map))?;
        Ok(self.push("scale_by_map", vec![x, map], out, |ctx| {
            let x = ctx.input(0);
            let m = ctx.input(1);
            let g = ctx.grad_out();
            let (c_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let hw = h * w;
            let gx = ops::scale_by_map(g, m).expect("same shapes");
            let mut gm = Tensor::zeros(m.shape());
            for p in 0..hw {
                let mut acc = S::zero();
                for c in 0..c_n {
                    acc += g.data()[c * hw + p] * x.data()[c * hw + p];
                }
                gm.data_mut()[p] = acc;
            }
            vec![gx, gm]
        }))
    }

    /// Gathers `source[:, index(p)]` into a full-resolution map; indices are
    /// constants, gradients scatter-add back into the source positions.
    pub fn gather_positions(
        &mut self,
        source: ValueId,
        indices: Arc<Vec<(u32, u32)>>,
        out_hw: (usize, usize),
    ) -> Result<ValueId> {
        let out = crate::cncam::gather_positions(self.value(source), &indices, out_hw)?;
        Ok(self.push("gather_positions", vec![source], out, move |ctx| {
            let src = ctx.input(0);
            let g = ctx.grad_out();
            let (c_n, sh, sw) = (src.shape()[0], src.shape()[1], src.shape()[2]);
            let hw = g.shape()[1] * g.shape()[2];
            let mut gs = Tensor::zeros(src.shape());
            let gd = gs.data_mut();
            for ch in 0..c_n {
                for (p, &(r, c)) in indices.iter().enumerate() {
                    gs_add(gd, (ch * sh + r as usize) * sw + c as usize, g.data()[ch * hw + p]);
                }
            }
            vec![gs]
        }))
    }

    /// One patch cell of the gathered top-K candidates: for candidate k and
    /// cell displacement (dr, dc), output channel k*C+c at position p is the
    /// zero-padded source value at p + offset_k(p) + (dr, dc). Offsets are
    /// laid out position-major, candidate-minor.
    pub fn gather_candidate_cell(
        &mut self,
        source: ValueId,
        offsets: Arc<Vec<(i16, i16)>>,
        k: usize,
        cell: (i32, i32),
    ) -> Result<ValueId> {
        let src = self.value(source);
        src.expect_rank(3, "gather_candidate_cell source")?;
        let (c_n, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
        if offsets.len() != h * w * k {
            return Err(Error::contract(format!(
                "gather_candidate_cell: {} offsets for {h}x{w} positions x {k} candidates",
                offsets.len()
            )));
        }
        let mut out = Tensor::zeros(&[k * c_n, h, w]);
        {
            let od = out.data_mut();
            let sd = src.data();
            for ki in 0..k {
                for p in 0..h * w {
                    let (r, c) = ((p / w) as i32, (p % w) as i32);
                    let off = offsets[p * k + ki];
                    let rr = r + off.0 as i32 + cell.0;
                    let cc = c + off.1 as i32 + cell.1;
                    if rr >= 0 && rr < h as i32 && cc >= 0 && cc < w as i32 {
                        let spos = rr as usize * w + cc as usize;
                        for ch in 0..c_n {
                            od[(ki * c_n + ch) * h * w + p] = sd[ch * h * w + spos];
                        }
                    }
                }
            }
        }
        Ok(self.push("gather_candidate_cell", vec![source], out, move |ctx| {
            let src = ctx.input(0);
            let g = ctx.grad_out();
            let (c_n, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
            let mut gs = Tensor::zeros(src.shape());
            let gd = gs.data_mut();
            for ki in 0..k {
                for p in 0..h * w {
                    let (r, c) = ((p / w) as i32, (p % w) as i32);
                    let off = offsets[p * k + ki];
                    let rr = r + off.0 as i32 + cell.0;
                    let cc = c + off.1 as i32 + cell.1;
                    if rr >= 0 && rr < h as i32 && cc >= 0 && cc < w as i32 {
                        let spos = rr as usize * w + cc as usize;
                        for ch in 0..c_n {
                            gs_add(gd, ch * h * w + spos, g.data()[(ki * c_n + ch) * h * w + p]);
                        }
                    }
                }
            }
            vec![gs]
        }))
    }

    /// Cosine correlation of two vectors as a scalar tape value; backward is
    /// the analytic quotient-rule gradient.
    pub fn correlate(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let score = tmcam::correlate(self.value(a).data(), self.value(b).data())?;
        Ok(self.push("correlate", vec![a, b], Tensor::scalar(score), |ctx| {
            let g = ctx.grad_out().data()[0];
            let (ga, gb) = tmcam::correlate_grad(ctx.input(0).data(), ctx.input(1).data(), g);
            vec![
                Tensor::new(ctx.input(0).shape().to_vec(), ga).expect("same shape"),
                Tensor::new(ctx.input(1).shape().to_vec(), gb).expect("same shape"),
            ]
        }))
    }

    pub fn charbonnier(&mut self, pred: ValueId, target: ValueId, eps: S) -> Result<ValueId> {
        let v = loss::charbonnier(self.value(pred), self.value(target), eps)?;
        Ok(self.push(
            "charbonnier",
            vec![pred, target],
            Tensor::scalar(v),
            move |ctx| {
                let g = ctx.grad_out().data()[0];
                let gp = loss::charbonnier_backward(ctx.input(0), ctx.input(1), eps, g);
                let gt = gp.map(|v| -v);
                vec![gp, gt]
            },
        ))
    }

    /// Edge-aware loss; the mask is computed from the target at record time
    /// and held constant in backward (it is piecewise constant in the
    /// target).
    pub fn edge_aware_loss(
        &mut self,
        pred: ValueId,
        target: ValueId,
        delta: S,
        lambda: S,
        eps: S,
    ) -> Result<ValueId> {
        let v = loss::edge_aware_loss(self.value(pred), self.value(target), delta, lambda, eps)?;
        let mask = loss::edge_mask(self.value(target), delta)?.map().clone();
        Ok(self.push(
            "edge_aware_loss",
            vec![pred, target],
            Tensor::scalar(v),
            move |ctx| {
                let g = ctx.grad_out().data()[0];
                let gp =
                    loss::edge_aware_backward(ctx.input(0), ctx.input(1), &mask, lambda, eps, g);
                let gt = gp.map(|v| -v);
                vec![gp, gt]
            },
        ))
    }
}

#[inline(always)]
fn gs_add<S: Scalar>(data: &mut [S], idx: usize, v: S) {
    data[idx] += v;
}

/// Gradients of conv2d w.r.t. (input, kernel, bias). Mirrors the forward
/// loop ranges; each gradient plane is owned by one worker.
fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    grad_out: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cout, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let (oh_n, ow_n) = (grad_out.shape()[1], grad_out.shape()[2]);
    let g_data = grad_out.data();
    let k_data = kernel.data();
    let in_data = input.data();

    let mut grad_input = Tensor::zeros(input.shape());
    grad_input
        .data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(ci, gi_plane)| {
            for co in 0..cout {
                let g_plane = &g_data[co * oh_n * ow_n..(co + 1) * oh_n * ow_n];
                for kh_i in 0..kh {
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
                        for oh in oh_start..oh_end {
                            let ih = oh * stride + kh_i - padding;
                            let g_row = &g_plane[oh * ow_n..oh * ow_n + ow_n];
                            let gi_row = &mut gi_plane[ih * w..ih * w + w];
                            for ow in ow_start..ow_end {
                                gi_row[ow * stride + kw_i - padding] += wgt * g_row[ow];
                            }
                        }
                    }
                }
            }
        });

    let mut grad_kernel = Tensor::zeros(kernel.shape());
    grad_kernel
        .data_mut()
        .par_chunks_mut(cin * kh * kw)
        .enumerate()
        .for_each(|(co, gk_block)| {
            let g_plane = &g_data[co * oh_n * ow_n..(co + 1) * oh_n * ow_n];
            for ci in 0..cin {
                let in_plane = &in_data[ci * h * w..(ci + 1) * h * w];
                for kh_i in 0..kh {
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
                        let mut acc = S::zero();
                        for oh in oh_start..oh_end {
                            let ih = oh * stride + kh_i - padding;
                            let g_row = &g_plane[oh * ow_n..oh * ow_n + ow_n];
                            let in_row = &in_plane[ih * w..ih * w + w];
                            for ow in ow_start..ow_end {
                                acc += g_row[ow] * in_row[ow * stride + kw_i - padding];
                            }
                        }
                        gk_block[(ci * kh + kh_i) * kw + kw_i] = acc;
                    }
                }
            }
        });

    let mut grad_bias = Tensor::zeros(&[cout]);
    for co in 0..cout {
        let mut acc = S::zero();
        for &g in &g_data[co * oh_n * ow_n..(co + 1) * oh_n * ow_n] {
            acc += g;
        }
        grad_bias.data_mut()[co] = acc;
    }

    (grad_input, grad_kernel, grad_bias)
}

fn avg_pool2_backward<S: Scalar>(input_shape: &[usize], grad_out: &Tensor<S>) -> Tensor<S> {
    let (_c_n, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (oh_n, ow_n) = (grad_out.shape()[1], grad_out.shape()[2]);
    let quarter = S::from_f64(0.25);
    let g_data = grad_out.data();
    let mut gi = Tensor::zeros(input_shape);
    gi.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(c, plane)| {
            let g_plane = &g_data[c * oh_n * ow_n..(c + 1) * oh_n * ow_n];
            for oh in 0..oh_n {
                let r0 = 2 * oh;
                let r1 = (2 * oh + 1).min(h - 1);
                for ow in 0..ow_n {
                    let c0 = 2 * ow;
                    let c1 = (2 * ow + 1).min(w - 1);
                    let g = g_plane[oh * ow_n + ow] * quarter;
                    plane[r0 * w + c0] += g;
                    plane[r0 * w + c1] += g;
                    plane[r1 * w + c0] += g;
                    plane[r1 * w + c1] += g;
                }
            }
        });
    gi
}

fn bilinear_upsample2_backward<S: Scalar>(input_shape: &[usize], grad_out: &Tensor<S>) -> Tensor<S> {
    let (_c_n, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let rows = ops::bilinear2_axis::<S>(h);
    let cols = ops::bilinear2_axis::<S>(w);
    let one = S::one();
    let g_data = grad_out.data();
    let mut gi = Tensor::zeros(input_shape);
    gi.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(c, plane)| {
            let g_plane = &g_data[c * 4 * h * w..(c + 1) * 4 * h * w];
            for (oh, &(y0, y1, ty)) in rows.iter().enumerate() {
                for (ow, &(x0, x1, tx)) in cols.iter().enumerate() {
                    let g = g_plane[oh * 2 * w + ow];
                    plane[y0 * w + x0] += (one - ty) * (one - tx) * g;
                    plane[y0 * w + x1] += (one - ty) * tx * g;
                    plane[y1 * w + x0] += ty * (one - tx) * g;
                    plane[y1 * w + x1] += ty * tx * g;
                }
            }
        });
    gi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let mut rng = SplitMix64::new(1);
        let x = tape.leaf(Tensor::random_uniform(&[3, 4, 4], 1.0, &mut rng));
        let l = tape.sum_all(x);
        let grads = tape.backward(l).unwrap();
        let gx = grads.get(x).unwrap();
        assert!(gx.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn quadratic_gradient_is_x() {
        let mut tape = Tape::<f64>::new();
        let mut rng = SplitMix64::new(2);
        let t = Tensor::random_uniform(&[10], 1.0, &mut rng);
        let x = tape.leaf(t.clone());
        let sq = tape.mul(x, x).unwrap();
        let half = tape.scale(sq, 0.5);
        let l = tape.sum_all(half);
        let grads = tape.backward(l).unwrap();
        let gx = grads.get(x).unwrap();
        for (g, v) in gx.data().iter().zip(t.data()) {
            assert!((g - v).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreached_leaves_get_zero_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[3], 1.0));
        let unused = tape.leaf(Tensor::full(&[2, 2], 5.0));
        let l = tape.sum_all(x);
        let grads = tape.backward(l).unwrap();
        let gu = grads.get(unused).unwrap();
        assert_eq!(gu.shape(), &[2, 2]);
        assert!(gu.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inference_tape_keeps_no_records() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.leaf(Tensor::full(&[4], 2.0));
        let y = tape.scale(x, 3.0);
        assert_eq!(tape.value(y).data(), &[6.0, 6.0, 6.0, 6.0]);
        assert_eq!(tape.num_records(), 0);
    }

    #[test]
    fn pixel_shuffle_backward_is_inverse_permutation() {
        let mut tape = Tape::<f64>::new();
        let mut rng = SplitMix64::new(3);
        let x = tape.leaf(Tensor::random_uniform(&[4, 2, 2], 1.0, &mut rng));
        let y = tape.pixel_shuffle(x, 2).unwrap();
        let l = tape.sum_all(y);
        let grads = tape.backward(l).unwrap();
        // sum is invariant to permutation: gradient all ones
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn concat_backward_splits() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::full(&[1, 2, 2], 1.0));
        let b = tape.leaf(Tensor::full(&[2, 2, 2], 2.0));
        let cat = tape.concat_channels(&[a, b]).unwrap();
        let s2 = tape.scale(cat, 2.0);
        let l = tape.sum_all(s2);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().shape(), &[1, 2, 2]);
        assert_eq!(grads.get(b).unwrap().shape(), &[2, 2, 2]);
        assert!(grads.get(a).unwrap().data().iter().all(|&v| v == 2.0));
        assert!(grads.get(b).unwrap().data().iter().all(|&v| v == 2.0));
    }
}
