//! Temporal multi-correspondence aggregation: patch correlation, top-K
//! candidate search over a displacement window, and pixel-adaptive
//! aggregation of the selected candidates.
//!
//! Scoring contract shared by the per-position search and the optimized
//! whole-map kernel: patch vectors are flattened cell-major/channel-minor,
//! dot products and norms reduce in flat index order, and the score is
//! `dot / (norm_a * norm_b)` with either norm below 1e-12 mapping to 0.
//! Because the optimized kernel only memoizes patch vectors and norms, its
//! scores are bit-identical to the naive enumeration and candidate indices
//! match exactly.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One correspondence candidate: displacement from the reference position
/// and its correlation score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate<S: Scalar> {
    pub offset: (i32, i32),
    pub score: S,
}

/// How the per-position weight column over the s^2 patch cells is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// Learned conv logits, softmax-normalized (the production setting).
    Adaptive,
    /// Learned conv output used directly, no normalization.
    AdaptiveRaw,
    /// Fixed 1/s^2 weights (the equal-weight baseline).
    Uniform,
}

/// Top-K match records for one reference position, sorted by descending
/// score with ties broken by raster order of the candidate position.
#[derive(Debug, Clone)]
pub struct CandidateSet<S: Scalar> {
    pub position: (usize, usize),
    pub candidates: Vec<Candidate<S>>,
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Cosine similarity of two equal-length patch vectors (normalized inner
/// product). Either norm below 1e-12 defines the score as 0.
pub fn correlate<S: Scalar>(a: &[S], b: &[S]) -> Result<S> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "correlate: length mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    let eps = S::from_f64(1e-12);
    if na < eps || nb < eps {
        return Ok(S::zero());
    }
    Ok(dot(a, b) / (na * nb))
}

/// Gradient of [`correlate`] with respect to both inputs, computed
/// analytically (quotient rule on the cosine). Returns zero gradients in the
/// zero-norm regime where the score is the constant 0.
pub fn correlate_grad<S: Scalar>(a: &[S], b: &[S], grad_out: S) -> (Vec<S>, Vec<S>) {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    let eps = S::from_f64(1e-12);
    if na < eps || nb < eps {
        return (vec![S::zero(); a.len()], vec![S::zero(); b.len()]);
    }
    let d = dot(a, b);
    let inv = S::one() / (na * nb);
    let score = d * inv;
    let ga = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| grad_out * (y * inv - score * x / (na * na)))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| grad_out * (x * inv - score * y / (nb * nb)))
        .collect();
    (ga, gb)
}

/// Writes the flattened s x s x C patch centered at (row, col) into `out`,
/// zero-padding cells beyond the borders. Layout: cell-major (raster over
/// the patch window), channel-minor.
pub fn extract_patch_into<S: Scalar>(
    map: &Tensor<S>,
    row: usize,
    col: usize,
    s: usize,
    out: &mut [S],
) {
    let (c_n, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    debug_assert_eq!(out.len(), s * s * c_n);
    let half = (s / 2) as i32;
    let data = map.data();
    let mut cell = 0;
    for dr in -half..=half {
        let rr = row as i32 + dr;
        for dc in -half..=half {
            let cc = col as i32 + dc;
            let base = cell * c_n;
            if rr >= 0 && rr < h as i32 && cc >= 0 && cc < w as i32 {
                let off = rr as usize * w + cc as usize;
                for ch in 0..c_n {
                    out[base + ch] = data[ch * h * w + off];
                }
            } else {
                out[base..base + c_n].fill(S::zero());
            }
            cell += 1;
        }
    }
}

/// Allocating wrapper around [`extract_patch_into`].
pub fn extract_patch<S: Scalar>(map: &Tensor<S>, row: usize, col: usize, s: usize) -> Vec<S> {
    let mut out = vec![S::zero(); s * s * map.shape()[0]];
    extract_patch_into(map, row, col, s, &mut out);
    out
}

/// Descending score, ties by raster order of the candidate position (which
/// equals raster order of the offset for a fixed reference position).
fn select_top_k<S: Scalar>(mut cands: Vec<Candidate<S>>, k: usize) -> Vec<Candidate<S>> {
    cands.sort_by(|a, b| {
        match b
            .score
            .partial_cmp(&a.score)
            .expect("correlation scores are finite")
        {
            Ordering::Equal => (a.offset.0, a.offset.1).cmp(&(b.offset.0, b.offset.1)),
            ord => ord,
        }
    });
    cands.truncate(k);
    cands
}

fn check_search_args<S: Scalar>(
    reference: &Tensor<S>,
    neighbor: &Tensor<S>,
    s: usize,
    d: usize,
    k: usize,
) -> Result<()> {
    reference.expect_rank(3, "top_k_search reference")?;
    neighbor.expect_rank(3, "top_k_search neighbor")?;
    if reference.shape() != neighbor.shape() {
        return Err(Error::shape(format!(
            "top_k_search: reference {:?} vs neighbor {:?}",
            reference.shape(),
            neighbor.shape()
        )));
    }
    if s.is_multiple_of(2) {
        return Err(Error::config(format!("patch size {s} must be odd")));
    }
    let window = (2 * d + 1) * (2 * d + 1);
    if k == 0 || k > window {
        return Err(Error::config(format!(
            "top_k: K={k} outside 1..={window} for d={d}"
        )));
    }
    Ok(())
}

/// Top-K most correlated patches of `neighbor` around `position`, searching
/// the (2d+1)^2 per-axis displacement window clamped at the image borders
/// (so border positions may yield fewer than K candidates).
///
/// This is the plain enumeration the optimized volume kernel is checked
/// against.
pub fn top_k_search<S: Scalar>(
    reference: &Tensor<S>,
    neighbor: &Tensor<S>,
    position: (usize, usize),
    s: usize,
    d: usize,
    k: usize,
) -> Result<CandidateSet<S>> {
    check_search_args(reference, neighbor, s, d, k)?;
    let (h, w) = (reference.shape()[1], reference.shape()[2]);
    let (row, col) = position;
    if row >= h || col >= w {
        return Err(Error::shape(format!(
            "top_k_search: position {position:?} outside {h}x{w}"
        )));
    }
    let ref_patch = extract_patch(reference, row, col, s);
    let di = d as i32;
    let mut cands = Vec::with_capacity((2 * d + 1) * (2 * d + 1));
    for dr in -di..=di {
        let rr = row as i32 + dr;
        if rr < 0 || rr >= h as i32 {
            continue;
        }
        for dc in -di..=di {
            let cc = col as i32 + dc;
            if cc < 0 || cc >= w as i32 {
                continue;
            }
            let nbr_patch = extract_patch(neighbor, rr as usize, cc as usize, s);
            let score = correlate(&ref_patch, &nbr_patch)?;
            cands.push(Candidate {
                offset: (dr, dc),
                score,
            });
        }
    }
    Ok(CandidateSet {
        position,
        candidates: select_top_k(cands, k),
    })
}

/// Precomputed flattened patch vectors and norms for every position of a map.
pub struct PatchTable<S: Scalar> {
    data: Vec<S>,
    norms: Vec<S>,
    stride: usize,
    width: usize,
}

impl<S: Scalar> PatchTable<S> {
    pub fn build(map: &Tensor<S>, s: usize) -> Self {
        let (c_n, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
        let stride = s * s * c_n;
        let mut data = vec![S::zero(); h * w * stride];
        let mut norms = vec![S::zero(); h * w];
        data.par_chunks_mut(stride)
            .zip(norms.par_iter_mut())
            .enumerate()
            .for_each(|(p, (patch, norm))| {
                extract_patch_into(map, p / w, p % w, s, patch);
                *norm = dot(patch, patch).sqrt();
            });
        PatchTable {
            data,
            norms,
            stride,
            width: w,
        }
    }

    #[inline]
    pub fn patch(&self, row: usize, col: usize) -> &[S] {
        let p = row * self.width + col;
        &self.data[p * self.stride..(p + 1) * self.stride]
    }

    #[inline]
    pub fn norm(&self, row: usize, col: usize) -> S {
        self.norms[row * self.width + col]
    }
}

/// Optimized whole-map top-K correlation volume. Memoizes patch vectors and
/// norms for both maps and parallelizes across reference positions; scores
/// and selected indices are bit-identical to running [`top_k_search`] at
/// every position.
pub fn top_k_volume<S: Scalar>(
    reference: &Tensor<S>,
    neighbor: &Tensor<S>,
    s: usize,
    d: usize,
    k: usize,
) -> Result<Vec<CandidateSet<S>>> {
    check_search_args(reference, neighbor, s, d, k)?;
    let (h, w) = (reference.shape()[1], reference.shape()[2]);
    let ref_table = PatchTable::build(reference, s);
    let nbr_table = PatchTable::build(neighbor, s);
    let eps = S::from_f64(1e-12);
    let di = d as i32;
    let sets: Vec<CandidateSet<S>> = (0..h * w)
        .into_par_iter()
        .map(|p| {
            let (row, col) = (p / w, p % w);
            let ref_patch = ref_table.patch(row, col);
            let ref_norm = ref_table.norm(row, col);
            let mut cands = Vec::with_capacity((2 * d + 1) * (2 * d + 1));
            for dr in -di..=di {
                let rr = row as i32 + dr;
                if rr < 0 || rr >= h as i32 {
                    continue;
                }
                for dc in -di..=di {
                    let cc = col as i32 + dc;
                    if cc < 0 || cc >= w as i32 {
                        continue;
                    }
                    let nbr_norm = nbr_table.norm(rr as usize, cc as usize);
                    let score = if ref_norm < eps || nbr_norm < eps {
                        S::zero()
                    } else {
                        dot(ref_patch, nbr_table.patch(rr as usize, cc as usize))
                            / (ref_norm * nbr_norm)
                    };
                    cands.push(Candidate {
                        offset: (dr, dc),
                        score,
                    });
                }
            }
            CandidateSet {
                position: (row, col),
                candidates: select_top_k(cands, k),
            }
        })
        .collect();
    Ok(sets)
}

/// Flattens per-position candidate offsets (position-major, candidate-minor)
/// for the gather ops, padding positions whose clamped border window yielded
/// fewer than K candidates by repeating the last one.
pub fn candidate_offsets<S: Scalar>(sets: &[CandidateSet<S>], k: usize) -> Vec<(i16, i16)> {
    let mut out = Vec::with_capacity(sets.len() * k);
    for set in sets {
        for i in 0..k {
            let cand = set
                .candidates
                .get(i)
                .or_else(|| set.candidates.last())
                .expect("search window yields at least one candidate");
            out.push((cand.offset.0 as i16, cand.offset.1 as i16));
        }
    }
    out
}

/// Smallest correlation-score gap at the top-K selection boundary across all
/// positions (K-th kept candidate vs best discarded one). Positions whose
/// clamped window holds no discarded candidate are skipped; returns infinity
/// when no boundary exists. Gradient checks require this gap to clear the
/// tie tolerance before trusting finite differences.
pub fn selection_boundary_gap<S: Scalar>(
    reference: &Tensor<S>,
    neighbor: &Tensor<S>,
    s: usize,
    d: usize,
    k: usize,
) -> Result<f64> {
    let sets = top_k_volume(reference, neighbor, s, d, k + 1)?;
    let mut min_gap = f64::INFINITY;
    for set in &sets {
        if set.candidates.len() > k {
            let gap = set.candidates[k - 1].score.as_f64() - set.candidates[k].score.as_f64();
            min_gap = min_gap.min(gap);
        }
    }
    Ok(min_gap)
}

/// Pixel-adaptive weight map: a conv over channel-concat [neighbor,
/// reference] producing s^2 channels, softmax-normalized across those
/// channels so every column is a convex combination (the raw mode skips the
/// softmax).
pub fn adaptive_weights<S: Scalar>(
    reference: &Tensor<S>,
    neighbor: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    s: usize,
    normalize: bool,
) -> Result<Tensor<S>> {
    if reference.shape() != neighbor.shape() {
        return Err(Error::shape(format!(
            "adaptive_weights: reference {:?} vs neighbor {:?}",
            reference.shape(),
            neighbor.shape()
        )));
    }
    weight.expect_rank(4, "adaptive_weights conv weight")?;
    if weight.shape()[0] != s * s {
        return Err(Error::shape(format!(
            "adaptive_weights: conv must output s^2 = {} channels, got {}",
            s * s,
            weight.shape()[0]
        )));
    }
    let stacked = ops::concat_channels(&[neighbor, reference])?;
    let pad = (weight.shape()[2] - 1) / 2;
    let logits = ops::conv2d(&stacked, weight, bias, 1, pad)?;
    if normalize {
        ops::softmax_channels(&logits)
    } else {
        Ok(logits)
    }
}

/// Two 1x1 channel-mixing layers (K*C -> C -> C) with a leaky-relu between,
/// applied per patch cell; then the per-cell outputs are collapsed with the
/// s^2 weight column (the Eq.-style dot over cells, shared across channels).
///
/// `patches` holds the K candidate patch vectors in descending-score order,
/// each flattened cell-major/channel-minor; the aggregated per-cell input is
/// the candidate-major concatenation [patch_1, ..., patch_K] of one cell.
pub fn aggregate_candidates<S: Scalar>(
    patches: &[&[S]],
    w1: &Tensor<S>,
    b1: &Tensor<S>,
    w2: &Tensor<S>,
    b2: &Tensor<S>,
    weight_column: &[S],
    slope: S,
) -> Result<Vec<S>> {
    w1.expect_rank(4, "aggregate w1")?;
    w2.expect_rank(4, "aggregate w2")?;
    let c_n = w1.shape()[0];
    if !w1.shape()[1].is_multiple_of(c_n) {
        return Err(Error::shape(format!(
            "aggregate w1: input channels {} not a multiple of output channels {c_n}",
            w1.shape()[1]
        )));
    }
    let k = w1.shape()[1] / c_n;
    if patches.len() != k {
        return Err(Error::contract(format!(
            "aggregate_candidates: got {} candidates, Aggr expects {k}",
            patches.len()
        )));
    }
    if w2.shape()[0] != c_n || w2.shape()[1] != c_n {
        return Err(Error::shape(format!(
            "aggregate w2: expected {c_n}x{c_n} channel mixing, got {:?}",
            w2.shape()
        )));
    }
    let s2 = weight_column.len();
    for p in patches {
        if p.len() != s2 * c_n {
            return Err(Error::shape(format!(
                "aggregate_candidates: patch length {} != s^2*C = {}",
                p.len(),
                s2 * c_n
            )));
        }
    }
    let w1d = w1.data();
    let w2d = w2.data();
    let mut out = vec![S::zero(); c_n];
    let mut cell_in = vec![S::zero(); k * c_n];
    let mut hidden = vec![S::zero(); c_n];
    for cell in 0..s2 {
        for (ki, patch) in patches.iter().enumerate() {
            cell_in[ki * c_n..(ki + 1) * c_n]
                .copy_from_slice(&patch[cell * c_n..(cell + 1) * c_n]);
        }
        for co in 0..c_n {
            let row = &w1d[co * k * c_n..(co + 1) * k * c_n];
            let mut acc = S::zero();
            for (&wv, &xv) in row.iter().zip(&cell_in) {
                acc += wv * xv;
            }
            let a = acc + b1.data()[co];
            hidden[co] = if a > S::zero() { a } else { slope * a };
        }
        let wc = weight_column[cell];
        for co in 0..c_n {
            let row = &w2d[co * c_n..(co + 1) * c_n];
            let mut acc = S::zero();
            for (&wv, &xv) in row.iter().zip(&hidden) {
                acc += wv * xv;
            }
            out[co] += (acc + b2.data()[co]) * wc;
        }
    }
    Ok(out)
}

/// Tape-recorded TM-CAM composites used by the network forward and the
/// training harnesses. Selection indices are frozen from the tape values at
/// record time; everything downstream of the gather is differentiable.
pub mod taped {
    use std::sync::Arc;

    use crate::autodiff::{Tape, ValueId};
    use crate::error::Result;
    use crate::scalar::Scalar;

    use super::{candidate_offsets, top_k_volume, WeightMode};

    /// Parameter handles for one pyramid level's aggregation unit.
    #[derive(Debug, Clone, Copy)]
    pub struct LevelParamIds {
        pub aggr_w1: ValueId,
        pub aggr_b1: ValueId,
        pub aggr_w2: ValueId,
        pub aggr_b2: ValueId,
        pub wmap_w: ValueId,
        pub wmap_b: ValueId,
    }

    /// Parameter handles for the full 3-level hierarchy. `fuse[l]` merges
    /// the upsampled aligned map of level l+1 into level l.
    #[derive(Debug, Clone)]
    pub struct TmcamParamIds {
        pub levels: Vec<LevelParamIds>,
        pub fuse: Vec<(ValueId, ValueId)>,
    }

    /// Single-level alignment: top-K search (frozen), per-cell gather,
    /// two-layer 1x1 Aggr, and the adaptive (or uniform) weight-column
    /// collapse. Output has the reference's shape.
    #[allow(clippy::too_many_arguments)]
    pub fn align_level<S: Scalar>(
        tape: &mut Tape<S>,
        reference: ValueId,
        neighbor: ValueId,
        params: &LevelParamIds,
        s: usize,
        d: usize,
        k: usize,
        mode: WeightMode,
        slope: S,
    ) -> Result<ValueId> {
        let sets = top_k_volume(tape.value(reference), tape.value(neighbor), s, d, k)?;
        let offsets = Arc::new(candidate_offsets(&sets, k));
        let weight_map = match mode {
            WeightMode::Uniform => None,
            WeightMode::Adaptive | WeightMode::AdaptiveRaw => {
                let cat = tape.concat_channels(&[neighbor, reference])?;
                let pad = (tape.value(params.wmap_w).shape()[2] - 1) / 2;
                let logits = tape.conv2d(cat, params.wmap_w, params.wmap_b, 1, pad)?;
                if mode == WeightMode::Adaptive {
                    Some(tape.softmax_channels(logits)?)
                } else {
                    Some(logits)
                }
            }
        };
        let half = (s / 2) as i32;
        let uniform = S::from_f64(1.0 / (s * s) as f64);
        let mut acc: Option<ValueId> = None;
        let mut cell_idx = 0usize;
        for dr in -half..=half {
            for dc in -half..=half {
                let gathered =
                    tape.gather_candidate_cell(neighbor, offsets.clone(), k, (dr, dc))?;
                let hidden = tape.conv2d(gathered, params.aggr_w1, params.aggr_b1, 1, 0)?;
                let act = tape.leaky_relu(hidden, slope);
                let mixed = tape.conv2d(act, params.aggr_w2, params.aggr_b2, 1, 0)?;
                let weighted = match weight_map {
                    Some(wm) => {
                        let column = tape.slice_channel(wm, cell_idx)?;
                        tape.scale_by_map(mixed, column)?
                    }
                    None => tape.scale(mixed, uniform),
                };
                acc = Some(match acc {
                    Some(prev) => tape.add(prev, weighted)?,
                    None => weighted,
                });
                cell_idx += 1;
            }
        }
        Ok(acc.expect("patch has at least one cell"))
    }

    /// Hierarchical alignment over 3 levels, coarsest first: align level 2,
    /// then for levels 1 and 0 fuse the upsampled coarser alignment with the
    /// neighbor features (concat + conv) and align against the reference.
    /// Returns the final level-0 map.
    #[allow(clippy::too_many_arguments)]
    pub fn tmcam_align<S: Scalar>(
        tape: &mut Tape<S>,
        ref_levels: &[ValueId; 3],
        nbr_levels: &[ValueId; 3],
        params: &TmcamParamIds,
        s: usize,
        max_disp: &[usize; 3],
        k: usize,
        mode: WeightMode,
        slope: S,
    ) -> Result<ValueId> {
        Ok(tmcam_align_all(
            tape, ref_levels, nbr_levels, params, s, max_disp, k, mode, slope,
        )?[0])
    }

    /// [`tmcam_align`] exposing every level's aligned map (index = level);
    /// the training harness deep-supervises all three.
    #[allow(clippy::too_many_arguments)]
    pub fn tmcam_align_all<S: Scalar>(
        tape: &mut Tape<S>,
        ref_levels: &[ValueId; 3],
        nbr_levels: &[ValueId; 3],
        params: &TmcamParamIds,
        s: usize,
        max_disp: &[usize; 3],
        k: usize,
        mode: WeightMode,
        slope: S,
    ) -> Result<[ValueId; 3]> {
        let mut aligned = align_level(
            tape,
            ref_levels[2],
            nbr_levels[2],
            &params.levels[2],
            s,
            max_disp[2],
            k,
            mode,
            slope,
        )?;
        let mut out = [aligned; 3];
        for l in (0..2).rev() {
            let up = tape.bilinear_upsample2(aligned)?;
            let cat = tape.concat_channels(&[up, nbr_levels[l]])?;
            let (fw, fb) = params.fuse[l];
            let pad = (tape.value(fw).shape()[2] - 1) / 2;
            let correction = tape.conv2d(cat, fw, fb, 1, pad)?;
            // residual fusion keeps the fused map in the neighbor's value
            // space; the learned correction injects the coarse alignment
            // only where the local window cannot reach
            let fused = tape.add(nbr_levels[l], correction)?;
            aligned = align_level(
                tape,
                ref_levels[l],
                fused,
                &params.levels[l],
                s,
                max_disp[l],
                k,
                mode,
                slope,
            )?;
            out[l] = aligned;
        }
        Ok(out)
    }
}
