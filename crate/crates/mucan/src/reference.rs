//! Naive reference kernels.
//!
//! These are the slow, obviously-correct formulations the optimized kernels
//! are checked against (equivalence is asserted by the test suite and by
//! `bench` before timing anything). They share the per-element reduction
//! orders documented in [`crate::ops`] and [`crate::tmcam`], so agreement is
//! exact in 64-bit mode, not just within tolerance.

use crate::cncam::{self, CncamWeights};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tmcam::{self, CandidateSet};

/// Direct six-loop convolution; one bounds-checked accumulation per output
/// element in (ci, kh, kw) order with the bias added last.
pub fn conv2d_naive<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    input.expect_rank(3, "conv2d input")?;
    kernel.expect_rank(4, "conv2d kernel")?;
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cout, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let oh_n = (h + 2 * padding - kh) / stride + 1;
    let ow_n = (w + 2 * padding - kw) / stride + 1;
    let mut out = Tensor::zeros(&[cout, oh_n, ow_n]);
    for co in 0..cout {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                let mut acc = S::zero();
                for ci in 0..cin {
                    for kh_i in 0..kh {
                        let ih = (oh * stride + kh_i) as i64 - padding as i64;
                        if ih < 0 || ih >= h as i64 {
                            continue;
                        }
                        for kw_i in 0..kw {
                            let iw = (ow * stride + kw_i) as i64 - padding as i64;
                            if iw < 0 || iw >= w as i64 {
                                continue;
                            }
                            acc += input.at3(ci, ih as usize, iw as usize)
                                * kernel.data()[((co * cin + ci) * kh + kh_i) * kw + kw_i];
                        }
                    }
                }
                out.set3(co, oh, ow, acc + bias.data()[co]);
            }
        }
    }
    Ok(out)
}

/// Per-element 2x2 mean with edge replication on odd extents.
pub fn avg_pool2_naive<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    input.expect_rank(3, "avg_pool2 input")?;
    let (c_n, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh_n, ow_n) = (h.div_ceil(2), w.div_ceil(2));
    let quarter = S::from_f64(0.25);
    let mut out = Tensor::zeros(&[c_n, oh_n, ow_n]);
    for c in 0..c_n {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                let r0 = 2 * oh;
                let r1 = (2 * oh + 1).min(h - 1);
                let c0 = 2 * ow;
                let c1 = (2 * ow + 1).min(w - 1);
                let mut acc = input.at3(c, r0, c0);
                acc += input.at3(c, r0, c1);
                acc += input.at3(c, r1, c0);
                acc += input.at3(c, r1, c1);
                out.set3(c, oh, ow, acc * quarter);
            }
        }
    }
    Ok(out)
}

/// Whole-map top-K correspondence search as a plain per-position loop over
/// [`tmcam::top_k_search`]; the oracle side of the `corr` benchmark.
pub fn top_k_volume_naive<S: Scalar>(
    reference: &Tensor<S>,
    neighbor: &Tensor<S>,
    s: usize,
    d: usize,
    k: usize,
) -> Result<Vec<CandidateSet<S>>> {
    let (h, w) = (reference.shape()[1], reference.shape()[2]);
    let mut sets = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            sets.push(tmcam::top_k_search(reference, neighbor, (row, col), s, d, k)?);
        }
    }
    Ok(sets)
}

/// Per-position aggregation loop: search, gather the K candidate patches
/// (repeating the worst candidate when the clamped border window yields
/// fewer than K), and collapse them with the position's weight column.
#[allow(clippy::too_many_arguments)]
pub fn align_level_naive<S: Scalar>(
    reference: &Tensor<S>,
    neighbor: &Tensor<S>,
    aggr_w1: &Tensor<S>,
    aggr_b1: &Tensor<S>,
    aggr_w2: &Tensor<S>,
    aggr_b2: &Tensor<S>,
    wmap_w: &Tensor<S>,
    wmap_b: &Tensor<S>,
    s: usize,
    d: usize,
    k: usize,
    mode: tmcam::WeightMode,
    slope: S,
) -> Result<Tensor<S>> {
    let (c_n, h, w) = (reference.shape()[0], reference.shape()[1], reference.shape()[2]);
    let s2 = s * s;
    let weight_map = match mode {
        tmcam::WeightMode::Uniform => None,
        tmcam::WeightMode::Adaptive => Some(tmcam::adaptive_weights(
            reference, neighbor, wmap_w, wmap_b, s, true,
        )?),
        tmcam::WeightMode::AdaptiveRaw => Some(tmcam::adaptive_weights(
            reference, neighbor, wmap_w, wmap_b, s, false,
        )?),
    };
    let uniform = vec![S::from_f64(1.0 / s2 as f64); s2];
    let mut out = Tensor::zeros(&[c_n, h, w]);
    for row in 0..h {
        for col in 0..w {
            let set = tmcam::top_k_search(reference, neighbor, (row, col), s, d, k)?;
            let mut patch_bufs: Vec<Vec<S>> = Vec::with_capacity(k);
            for cand in &set.candidates {
                let rr = (row as i32 + cand.offset.0) as usize;
                let cc = (col as i32 + cand.offset.1) as usize;
                patch_bufs.push(tmcam::extract_patch(neighbor, rr, cc, s));
            }
            while patch_bufs.len() < k {
                let last = patch_bufs.last().expect("window yields >= 1 candidate").clone();
                patch_bufs.push(last);
            }
            let patches: Vec<&[S]> = patch_bufs.iter().map(|p| p.as_slice()).collect();
            let column: Vec<S> = match &weight_map {
                Some(map) => (0..s2).map(|cell| map.at3(cell, row, col)).collect(),
                None => uniform.clone(),
            };
            let vec = tmcam::aggregate_candidates(
                &patches, aggr_w1, aggr_b1, aggr_w2, aggr_b2, &column, slope,
            )?;
            for (c, &v) in vec.iter().enumerate() {
                out.set3(c, row, col, v);
            }
        }
    }
    Ok(out)
}

/// Per-position CN-CAM loop: naive nonlocal search on a naive pooled
/// pyramid, explicit per-vector gating and mixing matvecs.
pub fn cncam_aggregate_naive<S: Scalar>(
    m0: &Tensor<S>,
    weights: &CncamWeights<S>,
    slope: S,
) -> Result<Tensor<S>> {
    weights.validate(m0.shape()[0])?;
    let (c_n, h, w) = (m0.shape()[0], m0.shape()[1], m0.shape()[2]);
    let mut scales = vec![m0.clone()];
    for _ in 1..cncam::SCALES {
        let next = avg_pool2_naive(scales.last().expect("non-empty"))?;
        scales.push(next);
    }
    let pyramid = cncam::ScalePyramid::from_scales(scales)?;
    let gate_vec = |x: &[S], wt: &Tensor<S>, b: &Tensor<S>| -> Vec<S> {
        (0..c_n)
            .map(|co| {
                let mut acc = S::zero();
                for (ci, &v) in x.iter().enumerate() {
                    acc += wt.data()[co * c_n + ci] * v;
                }
                let logit = acc + b.data()[co];
                x[co] * (S::one() / (S::one() + (-logit).exp()))
            })
            .collect()
    };
    let mut out = Tensor::zeros(m0.shape());
    for row in 0..h {
        for col in 0..w {
            let matches = cncam::nonlocal_nn(&pyramid, (row, col), 1)?;
            let query: Vec<S> = (0..c_n).map(|c| m0.at3(c, row, col)).collect();
            let mut cat = Vec::with_capacity(cncam::SCALES * c_n);
            cat.extend(gate_vec(&query, &weights.att[0].0, &weights.att[0].1));
            for m in &matches {
                cat.extend(gate_vec(
                    &m.vector,
                    &weights.att[m.scale].0,
                    &weights.att[m.scale].1,
                ));
            }
            let hidden: Vec<S> = (0..c_n)
                .map(|co| {
                    let mut acc = S::zero();
                    for (ci, &v) in cat.iter().enumerate() {
                        acc += weights.aggr_w1.data()[co * cncam::SCALES * c_n + ci] * v;
                    }
                    let a = acc + weights.aggr_b1.data()[co];
                    if a > S::zero() {
                        a
                    } else {
                        slope * a
                    }
                })
                .collect();
            for co in 0..c_n {
                let mut acc = S::zero();
                for (ci, &v) in hidden.iter().enumerate() {
                    acc += weights.aggr_w2.data()[co * c_n + ci] * v;
                }
                out.set3(co, row, col, acc + weights.aggr_b2.data()[co]);
            }
        }
    }
    Ok(out)
}

/// Sanity check helper used by equivalence sweeps: max |a-b| / max(1, |b|).
pub fn max_rel_diff<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / y.abs().max(1.0)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use crate::rng::SplitMix64;

    #[test]
    fn optimized_conv_matches_naive_exactly_f64() {
        let mut rng = SplitMix64::new(31);
        for case in 0..20 {
            let cin = 1 + rng.next_usize(4);
            let cout = 1 + rng.next_usize(4);
            let ks = [1, 3, 5][rng.next_usize(3)];
            let h = ks + rng.next_usize(12);
            let w = ks + rng.next_usize(12);
            let stride = 1 + rng.next_usize(2);
            let padding = rng.next_usize(ks / 2 + 1);
            let input = Tensor::<f64>::random_uniform(&[cin, h, w], 1.0, &mut rng);
            let kernel = Tensor::<f64>::random_uniform(&[cout, cin, ks, ks], 1.0, &mut rng);
            let bias = Tensor::<f64>::random_uniform(&[cout], 1.0, &mut rng);
            let fast = ops::conv2d(&input, &kernel, &bias, stride, padding).unwrap();
            let slow = conv2d_naive(&input, &kernel, &bias, stride, padding).unwrap();
            assert_eq!(fast, slow, "case {case}: shapes {cin}x{h}x{w} k{ks} s{stride} p{padding}");
        }
    }

    #[test]
    fn random_conv_matches_six_loop_oracle() {
        // the spec's 2x3x5x5 input, 4x3x3x3 kernel instance
        let mut rng = SplitMix64::new(32);
        let input = Tensor::<f32>::random_uniform(&[3, 5, 5], 1.0, &mut rng);
        let kernel = Tensor::<f32>::random_uniform(&[4, 3, 3, 3], 1.0, &mut rng);
        let bias = Tensor::<f32>::random_uniform(&[4], 1.0, &mut rng);
        let fast = ops::conv2d(&input, &kernel, &bias, 1, 1).unwrap();
        let slow = conv2d_naive(&input, &kernel, &bias, 1, 1).unwrap();
        assert!(max_rel_diff(&fast, &slow) < 1e-6);
    }

    #[test]
    fn optimized_pool_matches_naive_exactly() {
        let mut rng = SplitMix64::new(33);
        for _ in 0..20 {
            let c = 1 + rng.next_usize(4);
            let h = 1 + rng.next_usize(15);
            let w = 1 + rng.next_usize(15);
            let input = Tensor::<f64>::random_uniform(&[c, h, w], 1.0, &mut rng);
            assert_eq!(
                ops::avg_pool2(&input).unwrap(),
                avg_pool2_naive(&input).unwrap()
            );
        }
    }

    #[test]
    fn vectorized_cncam_matches_per_position_loop() {
        let mut rng = SplitMix64::new(35);
        let m0 = Tensor::<f64>::random_uniform(&[4, 12, 12], 1.0, &mut rng);
        let weights = CncamWeights {
            att: (0..cncam::SCALES)
                .map(|_| {
                    (
                        Tensor::random_uniform(&[4, 4, 1, 1], 0.5, &mut rng),
                        Tensor::random_uniform(&[4], 0.5, &mut rng),
                    )
                })
                .collect(),
            aggr_w1: Tensor::random_uniform(&[4, 16, 1, 1], 0.5, &mut rng),
            aggr_b1: Tensor::random_uniform(&[4], 0.5, &mut rng),
            aggr_w2: Tensor::random_uniform(&[4, 4, 1, 1], 0.5, &mut rng),
            aggr_b2: Tensor::random_uniform(&[4], 0.5, &mut rng),
        };
        let fast = cncam::cncam_aggregate(&m0, &weights, 0.1).unwrap();
        let slow = cncam_aggregate_naive(&m0, &weights, 0.1).unwrap();
        assert!(
            max_rel_diff(&fast, &slow) < 1e-6,
            "rel diff {}",
            max_rel_diff(&fast, &slow)
        );
    }

    #[test]
    fn vectorized_align_level_matches_per_position_loop() {
        let mut rng = SplitMix64::new(36);
        let (c_n, k, s, d) = (3usize, 3usize, 3usize, 2usize);
        let reference = Tensor::<f64>::random_uniform(&[c_n, 10, 10], 1.0, &mut rng);
        let neighbor = Tensor::<f64>::random_uniform(&[c_n, 10, 10], 1.0, &mut rng);
        let w1 = Tensor::random_uniform(&[c_n, k * c_n, 1, 1], 0.4, &mut rng);
        let b1 = Tensor::random_uniform(&[c_n], 0.4, &mut rng);
        let w2 = Tensor::random_uniform(&[c_n, c_n, 1, 1], 0.4, &mut rng);
        let b2 = Tensor::random_uniform(&[c_n], 0.4, &mut rng);
        let wm_w = Tensor::random_uniform(&[s * s, 2 * c_n, 3, 3], 0.4, &mut rng);
        let wm_b = Tensor::random_uniform(&[s * s], 0.4, &mut rng);
        let slow = align_level_naive(
            &reference, &neighbor, &w1, &b1, &w2, &b2, &wm_w, &wm_b, s, d, k, tmcam::WeightMode::Adaptive, 0.1,
        )
        .unwrap();

        let mut tape = crate::autodiff::Tape::<f64>::inference();
        let r = tape.leaf(reference);
        let n = tape.leaf(neighbor);
        let params = tmcam::taped::LevelParamIds {
            aggr_w1: tape.leaf(w1),
            aggr_b1: tape.leaf(b1),
            aggr_w2: tape.leaf(w2),
            aggr_b2: tape.leaf(b2),
            wmap_w: tape.leaf(wm_w),
            wmap_b: tape.leaf(wm_b),
        };
        let fast = tmcam::taped::align_level(&mut tape, r, n, &params, s, d, k, tmcam::WeightMode::Adaptive, 0.1).unwrap();
        let diff = max_rel_diff(tape.value(fast), &slow);
        assert!(diff < 1e-6, "rel diff {diff}");
    }

    #[test]
    fn align_level_uniform_weights_matches_loop_too() {
        let mut rng = SplitMix64::new(37);
        let (c_n, k, s, d) = (2usize, 2usize, 3usize, 1usize);
        let reference = Tensor::<f64>::random_uniform(&[c_n, 8, 8], 1.0, &mut rng);
        let neighbor = Tensor::<f64>::random_uniform(&[c_n, 8, 8], 1.0, &mut rng);
        let w1 = Tensor::random_uniform(&[c_n, k * c_n, 1, 1], 0.4, &mut rng);
        let b1 = Tensor::random_uniform(&[c_n], 0.4, &mut rng);
        let w2 = Tensor::random_uniform(&[c_n, c_n, 1, 1], 0.4, &mut rng);
        let b2 = Tensor::random_uniform(&[c_n], 0.4, &mut rng);
        let wm_w = Tensor::zeros(&[s * s, 2 * c_n, 3, 3]);
        let wm_b = Tensor::zeros(&[s * s]);
        let slow = align_level_naive(
            &reference, &neighbor, &w1, &b1, &w2, &b2, &wm_w, &wm_b, s, d, k, tmcam::WeightMode::Uniform, 0.1,
        )
        .unwrap();
        let mut tape = crate::autodiff::Tape::<f64>::inference();
        let r = tape.leaf(reference);
        let n = tape.leaf(neighbor);
        let params = tmcam::taped::LevelParamIds {
            aggr_w1: tape.leaf(w1),
            aggr_b1: tape.leaf(b1),
            aggr_w2: tape.leaf(w2),
            aggr_b2: tape.leaf(b2),
            wmap_w: tape.leaf(wm_w),
            wmap_b: tape.leaf(wm_b),
        };
        let fast =
            tmcam::taped::align_level(&mut tape, r, n, &params, s, d, k, tmcam::WeightMode::Uniform, 0.1).unwrap();
        let diff = max_rel_diff(tape.value(fast), &slow);
        assert!(diff < 1e-6, "rel diff {diff}");
    }

    #[test]
    fn optimized_volume_matches_naive_volume() {
        let mut rng = SplitMix64::new(34);
        for _ in 0..3 {
            let reference = Tensor::<f64>::random_uniform(&[3, 9, 9], 1.0, &mut rng);
            let neighbor = Tensor::<f64>::random_uniform(&[3, 9, 9], 1.0, &mut rng);
            let fast = tmcam::top_k_volume(&reference, &neighbor, 3, 2, 4).unwrap();
            let slow = top_k_volume_naive(&reference, &neighbor, 3, 2, 4).unwrap();
            for (a, b) in fast.iter().zip(&slow) {
                assert_eq!(a.position, b.position);
                for (x, y) in a.candidates.iter().zip(&b.candidates) {
                    assert_eq!(x.offset, y.offset);
                    assert_eq!(x.score.to_bits(), y.score.to_bits());
                }
            }
        }
    }
}
