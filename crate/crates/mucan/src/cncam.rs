//! Cross-scale nonlocal-correspondence aggregation: for every position of a
//! feature map, fetch its most-correlated feature from each coarser pyramid
//! scale, gate everything through sigmoid attention, and mix back to C
//! channels.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tmcam::{correlate, extract_patch, PatchTable};

/// Number of pyramid scales (the base map plus three pooled levels).
pub const SCALES: usize = 4;

/// Four feature maps, each obtained from the previous by stride-2 average
/// pooling; channel count constant across scales.
#[derive(Debug, Clone)]
pub struct ScalePyramid<S: Scalar> {
    scales: Vec<Tensor<S>>,
}

impl<S: Scalar> ScalePyramid<S> {
    /// Validates the ceil-halving extents chain and constant channel count.
    pub fn from_scales(scales: Vec<Tensor<S>>) -> Result<Self> {
        if scales.len() != SCALES {
            return Err(Error::shape(format!(
                "pyramid needs {SCALES} scales, got {}",
                scales.len()
            )));
        }
        for t in &scales {
            t.expect_rank(3, "pyramid scale")?;
        }
        for i in 1..SCALES {
            let (prev, cur) = (scales[i - 1].shape(), scales[i].shape());
            if cur[0] != prev[0] {
                return Err(Error::shape(format!(
                    "pyramid channel count changes at scale {i}: {} vs {}",
                    prev[0], cur[0]
                )));
            }
            if cur[1] != prev[1].div_ceil(2) || cur[2] != prev[2].div_ceil(2) {
                return Err(Error::shape(format!(
                    "pyramid scale {i} extents {:?} are not ceil-half of {:?}",
                    cur, prev
                )));
            }
        }
        Ok(ScalePyramid { scales })
    }

    pub fn scale(&self, s: usize) -> &Tensor<S> {
        &self.scales[s]
    }

    pub fn channels(&self) -> usize {
        self.scales[0].shape()[0]
    }
}

/// Builds the 4-scale pyramid by repeated stride-2 average pooling.
pub fn build_pyramid<S: Scalar>(m0: &Tensor<S>) -> Result<ScalePyramid<S>> {
    m0.expect_rank(3, "pyramid base")?;
    let mut scales = Vec::with_capacity(SCALES);
    scales.push(m0.clone());
    for _ in 1..SCALES {
        let next = ops::avg_pool2(scales.last().expect("non-empty"))?;
        scales.push(next);
    }
    ScalePyramid::from_scales(scales)
}

/// A nonlocal match on one coarser scale.
#[derive(Debug, Clone, PartialEq)]
pub struct NnMatch<S: Scalar> {
    pub scale: usize,
    pub position: (usize, usize),
    pub score: S,
    /// The matched C-vector (the feature column at the matched position).
    pub vector: Vec<S>,
}

/// Exhaustive nearest-neighbor search for the query at `position` in the
/// base scale, over all positions of each coarser scale. Ties are broken by
/// raster order (the first strictly-greater score wins). `s_query` is the
/// query patch size; the production setting is 1 (single-pixel feature).
pub fn nonlocal_nn<S: Scalar>(
    pyramid: &ScalePyramid<S>,
    position: (usize, usize),
    s_query: usize,
) -> Result<Vec<NnMatch<S>>> {
    if s_query.is_multiple_of(2) {
        return Err(Error::config(format!("query patch size {s_query} must be odd")));
    }
    let base = pyramid.scale(0);
    let (h, w) = (base.shape()[1], base.shape()[2]);
    if position.0 >= h || position.1 >= w {
        return Err(Error::shape(format!(
            "nonlocal_nn: position {position:?} outside {h}x{w}"
        )));
    }
    let query = extract_patch(base, position.0, position.1, s_query);
    let mut matches = Vec::with_capacity(SCALES - 1);
    for s in 1..SCALES {
        let map = pyramid.scale(s);
        let (sh, sw) = (map.shape()[1], map.shape()[2]);
        let mut best = (0usize, 0usize);
        let mut best_score = S::neg_infinity();
        for r in 0..sh {
            for c in 0..sw {
                let cand = extract_patch(map, r, c, s_query);
                let score = correlate(&query, &cand)?;
                if score > best_score {
                    best_score = score;
                    best = (r, c);
                }
            }
        }
        let c_n = map.shape()[0];
        let vector = (0..c_n).map(|c| map.at3(c, best.0, best.1)).collect();
        matches.push(NnMatch {
            scale: s,
            position: best,
            score: best_score,
            vector,
        });
    }
    Ok(matches)
}

/// Optimized whole-map nonlocal search: candidate patch vectors and norms
/// are memoized per scale in a contiguous (positions x features) layout and
/// queries run in parallel. Scores reduce in the same order as
/// [`nonlocal_nn`], so the returned indices are identical.
pub fn nonlocal_nn_map<S: Scalar>(
    pyramid: &ScalePyramid<S>,
    s_query: usize,
) -> Result<Vec<[(u32, u32); SCALES - 1]>> {
    let scales: Vec<&Tensor<S>> = (0..SCALES).map(|s| pyramid.scale(s)).collect();
    nonlocal_nn_map_scales(&scales, s_query)
}

/// [`nonlocal_nn_map`] over borrowed scale tensors (used by the taped path,
/// whose pyramid lives on the tape).
pub(crate) fn nonlocal_nn_map_scales<S: Scalar>(
    scales: &[&Tensor<S>],
    s_query: usize,
) -> Result<Vec<[(u32, u32); SCALES - 1]>> {
    if s_query.is_multiple_of(2) {
        return Err(Error::config(format!("query patch size {s_query} must be odd")));
    }
    let base = scales[0];
    let (h, w) = (base.shape()[1], base.shape()[2]);
    let query_table = PatchTable::build(base, s_query);
    let cand_tables: Vec<PatchTable<S>> = (1..SCALES)
        .map(|s| PatchTable::build(scales[s], s_query))
        .collect();
    let dims: Vec<(usize, usize)> = (1..SCALES)
        .map(|s| (scales[s].shape()[1], scales[s].shape()[2]))
        .collect();
    let eps = S::from_f64(1e-12);
    let out: Vec<[(u32, u32); SCALES - 1]> = (0..h * w)
        .into_par_iter()
        .map(|p| {
            let (row, col) = (p / w, p % w);
            let query = query_table.patch(row, col);
            let qn = query_table.norm(row, col);
            let mut picks = [(0u32, 0u32); SCALES - 1];
            for (si, table) in cand_tables.iter().enumerate() {
                let (sh, sw) = dims[si];
                let mut best = (0usize, 0usize);
                let mut best_score = S::neg_infinity();
                for r in 0..sh {
                    for c in 0..sw {
                        let vn = table.norm(r, c);
                        let score = if qn < eps || vn < eps {
                            S::zero()
                        } else {
                            let mut acc = S::zero();
                            for (&x, &y) in query.iter().zip(table.patch(r, c)) {
                                acc += x * y;
                            }
                            acc / (qn * vn)
                        };
                        if score > best_score {
                            best_score = score;
                            best = (r, c);
                        }
                    }
                }
                picks[si] = (best.0 as u32, best.1 as u32);
            }
            picks
        })
        .collect();
    Ok(out)
}

/// x gated by `sigmoid(conv1x1(x))`, elementwise.
pub fn attention_gate<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>> {
    let logits = ops::conv2d(x, weight, bias, 1, 0)?;
    ops::mul(x, &ops::sigmoid(&logits))
}

/// CN-CAM parameter set: one channel-preserving 1x1 attention gate per
/// scale, and a two-layer 1x1 Aggr mixing 4C concatenated channels back
/// down to C.
#[derive(Debug, Clone)]
pub struct CncamWeights<S: Scalar> {
    pub att: Vec<(Tensor<S>, Tensor<S>)>,
    pub aggr_w1: Tensor<S>,
    pub aggr_b1: Tensor<S>,
    pub aggr_w2: Tensor<S>,
    pub aggr_b2: Tensor<S>,
}

impl<S: Scalar> CncamWeights<S> {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.att.len() != SCALES {
            return Err(Error::shape(format!(
                "cncam: expected {SCALES} attention gates, got {}",
                self.att.len()
            )));
        }
        for (i, (w, _)) in self.att.iter().enumerate() {
            if w.shape() != [channels, channels, 1, 1] {
                return Err(Error::shape(format!(
                    "cncam attention gate {i}: expected ({channels},{channels},1,1), got {:?}",
                    w.shape()
                )));
            }
        }
        if self.aggr_w1.shape() != [channels, SCALES * channels, 1, 1] {
            return Err(Error::shape(format!(
                "cncam aggr: input channels must be {}, got {:?}",
                SCALES * channels,
                self.aggr_w1.shape()
            )));
        }
        if self.aggr_w2.shape() != [channels, channels, 1, 1] {
            return Err(Error::shape(format!(
                "cncam aggr second layer: expected ({channels},{channels},1,1), got {:?}",
                self.aggr_w2.shape()
            )));
        }
        Ok(())
    }
}

/// Gathers `source[:, index(p)]` into a full-resolution map.
pub fn gather_positions<S: Scalar>(
    source: &Tensor<S>,
    indices: &[(u32, u32)],
    out_hw: (usize, usize),
) -> Result<Tensor<S>> {
    source.expect_rank(3, "gather source")?;
    let (c_n, sh, sw) = (source.shape()[0], source.shape()[1], source.shape()[2]);
    let (h, w) = out_hw;
    if indices.len() != h * w {
        return Err(Error::shape(format!(
            "gather_positions: {} indices for {h}x{w} output",
            indices.len()
        )));
    }
    let mut out = Tensor::zeros(&[c_n, h, w]);
    for (p, &(r, c)) in indices.iter().enumerate() {
        debug_assert!((r as usize) < sh && (c as usize) < sw);
        for ch in 0..c_n {
            out.data_mut()[ch * h * w + p] = source.data()[(ch * sh + r as usize) * sw + c as usize];
        }
    }
    Ok(out)
}

/// Full CN-CAM forward (inference path): pyramid, nonlocal matches, gated
/// gather, concat, 1x1 Aggr stack. Output shape equals the input shape.
pub fn cncam_aggregate<S: Scalar>(
    m0: &Tensor<S>,
    weights: &CncamWeights<S>,
    slope: S,
) -> Result<Tensor<S>> {
    weights.validate(m0.shape()[0])?;
    let (h, w) = (m0.shape()[1], m0.shape()[2]);
    let pyramid = build_pyramid(m0)?;
    let picks = nonlocal_nn_map(&pyramid, 1)?;
    let mut gated = Vec::with_capacity(SCALES);
    gated.push(attention_gate(m0, &weights.att[0].0, &weights.att[0].1)?);
    for s in 1..SCALES {
        let idx: Vec<(u32, u32)> = picks.iter().map(|p| p[s - 1]).collect();
        let matched = gather_positions(pyramid.scale(s), &idx, (h, w))?;
        gated.push(attention_gate(&matched, &weights.att[s].0, &weights.att[s].1)?);
    }
    let refs: Vec<&Tensor<S>> = gated.iter().collect();
    let cat = ops::concat_channels(&refs)?;
    let hidden = ops::leaky_relu(
        &ops::conv2d(&cat, &weights.aggr_w1, &weights.aggr_b1, 1, 0)?,
        slope,
    );
    ops::conv2d(&hidden, &weights.aggr_w2, &weights.aggr_b2, 1, 0)
}

/// Tape-recorded CN-CAM used by the network forward: a differentiable
/// pooled pyramid, frozen nonlocal match indices, gated gathers, and the
/// 1x1 Aggr stack.
pub mod taped {
    use std::sync::Arc;

    use crate::autodiff::{Tape, ValueId};
    use crate::error::Result;
    use crate::scalar::Scalar;

    use super::{nonlocal_nn_map_scales, SCALES};

    /// Parameter handles: one attention gate per scale plus the two Aggr
    /// layers.
    #[derive(Debug, Clone)]
    pub struct CncamParamIds {
        pub att: Vec<(ValueId, ValueId)>,
        pub aggr_w1: ValueId,
        pub aggr_b1: ValueId,
        pub aggr_w2: ValueId,
        pub aggr_b2: ValueId,
    }

    fn gate<S: Scalar>(
        tape: &mut Tape<S>,
        x: ValueId,
        weight: ValueId,
        bias: ValueId,
    ) -> Result<ValueId> {
        let logits = tape.conv2d(x, weight, bias, 1, 0)?;
        let mask = tape.sigmoid(logits);
        tape.mul(x, mask)
    }

    pub fn cncam_aggregate<S: Scalar>(
        tape: &mut Tape<S>,
        m0: ValueId,
        params: &CncamParamIds,
        slope: S,
    ) -> Result<ValueId> {
        let (h, w) = {
            let t = tape.value(m0);
            (t.shape()[1], t.shape()[2])
        };
        let mut scale_ids = vec![m0];
        for _ in 1..SCALES {
            let next = tape.avg_pool2(*scale_ids.last().expect("non-empty"))?;
            scale_ids.push(next);
        }
        let picks = {
            let scales: Vec<&crate::tensor::Tensor<S>> =
                scale_ids.iter().map(|&id| tape.value(id)).collect();
            nonlocal_nn_map_scales(&scales, 1)?
        };
        let mut gated = Vec::with_capacity(SCALES);
        gated.push(gate(tape, m0, params.att[0].0, params.att[0].1)?);
        for s in 1..SCALES {
            let idx: Arc<Vec<(u32, u32)>> = Arc::new(picks.iter().map(|p| p[s - 1]).collect());
            let matched = tape.gather_positions(scale_ids[s], idx, (h, w))?;
            gated.push(gate(tape, matched, params.att[s].0, params.att[s].1)?);
        }
        let cat = tape.concat_channels(&gated)?;
        let hidden = tape.conv2d(cat, params.aggr_w1, params.aggr_b1, 1, 0)?;
        let act = tape.leaky_relu(hidden, slope);
        tape.conv2d(act, params.aggr_w2, params.aggr_b2, 1, 0)
    }
}
