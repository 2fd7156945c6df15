//! Best-of-K patch-match flow study on synthetic translated textures: the
//! oracle-selected end-point error of the top-K candidate set is measured as
//! K grows.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tmcam;

/// Per-pixel (u, v) displacement field, stored as a (2, H, W) tensor
/// (channel 0 = row displacement, channel 1 = column displacement).
#[derive(Debug, Clone)]
pub struct FlowField<S: Scalar> {
    flow: Tensor<S>,
}

impl<S: Scalar> FlowField<S> {
    pub fn constant(h: usize, w: usize, u: f64, v: f64) -> Self {
        let flow = Tensor::from_fn(&[2, h, w], |i| {
            if i < h * w {
                S::from_f64(u)
            } else {
                S::from_f64(v)
            }
        });
        FlowField { flow }
    }

    pub fn at(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.flow.at3(0, row, col).as_f64(),
            self.flow.at3(1, row, col).as_f64(),
        )
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.flow
    }
}

/// Smoothed random texture in [lo, hi]: white noise box-blurred twice.
pub(crate) fn smooth_texture(rng: &mut SplitMix64, h: usize, w: usize, lo: f64, hi: f64) -> Vec<f64> {
    smooth_texture_passes(rng, h, w, lo, hi, 2)
}

/// Smoothed random texture with a selectable number of blur passes.
pub(crate) fn smooth_texture_passes(
    rng: &mut SplitMix64,
    h: usize,
    w: usize,
    lo: f64,
    hi: f64,
    passes: usize,
) -> Vec<f64> {
    let mut field: Vec<f64> = (0..h * w).map(|_| rng.next_f64()).collect();
    for _ in 0..passes {
        let mut next = vec![0.0f64; h * w];
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dr in -1i32..=1 {
                    for dc in -1i32..=1 {
                        let rr = r as i32 + dr;
                        let cc = c as i32 + dc;
                        if rr >= 0 && rr < h as i32 && cc >= 0 && cc < w as i32 {
                            acc += field[rr as usize * w + cc as usize];
                            n += 1.0;
                        }
                    }
                }
                next[r * w + c] = acc / n;
            }
        }
        field = next;
    }
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &field {
        min = min.min(v);
        max = max.max(v);
    }
    let span = (max - min).max(1e-9);
    field
        .iter()
        .map(|&v| lo + (hi - lo) * (v - min) / span)
        .collect()
}

/// Synthetic pair for the flow study: B is A translated by an integer
/// `shift` (content motion, row/col) plus clipped Gaussian noise. Both
/// windows are cropped from a larger canvas so the ground-truth flow is the
/// constant `shift` everywhere, with no invented border content.
pub fn synth_pair<S: Scalar>(
    seed: u64,
    shift: (i32, i32),
    noise_sigma: f64,
    h: usize,
    w: usize,
) -> (Tensor<S>, Tensor<S>, FlowField<S>) {
    let mut rng = SplitMix64::new(seed);
    let margin = (shift.0.unsigned_abs().max(shift.1.unsigned_abs()) as usize) + 1;
    let (ch, cw) = (h + 2 * margin, w + 2 * margin);
    let canvas = smooth_texture(&mut rng, ch, cw, 0.2, 0.8);
    let at = |r: usize, c: usize| canvas[r * cw + c];
    let a = Tensor::from_fn(&[1, h, w], |i| {
        S::from_f64(at(margin + i / w, margin + i % w))
    });
    // b(p) = a(p - shift): window origin moves against the content motion
    let orig_r = (margin as i32 - shift.0) as usize;
    let orig_c = (margin as i32 - shift.1) as usize;
    let b = Tensor::from_fn(&[1, h, w], |i| {
        let clean = at(orig_r + i / w, orig_c + i % w);
        let noisy = if noise_sigma > 0.0 {
            (clean + noise_sigma * rng.normal()).clamp(0.0, 1.0)
        } else {
            clean
        };
        S::from_f64(noisy)
    });
    let gt = FlowField::constant(h, w, shift.0 as f64, shift.1 as f64);
    (a, b, gt)
}

/// Mean end-point error of the best-of-K protocol: per interior pixel, run
/// the top-K patch search and score the candidate offset closest to the
/// ground-truth flow. Interior excludes a margin of d + s/2 pixels.
pub fn best_of_k_epe<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    gt: &FlowField<S>,
    k: usize,
    d: usize,
    s: usize,
) -> Result<f64> {
    let window = (2 * d + 1) * (2 * d + 1);
    if k == 0 || k > window {
        return Err(Error::config(format!(
            "best_of_k_epe: K={k} outside 1..={window}"
        )));
    }
    let (h, w) = (a.shape()[1], a.shape()[2]);
    let margin = d + s / 2;
    if h <= 2 * margin || w <= 2 * margin {
        return Err(Error::config(format!(
            "best_of_k_epe: {h}x{w} image too small for interior margin {margin}"
        )));
    }
    let sets = tmcam::top_k_volume(a, b, s, d, k)?;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for row in margin..h - margin {
        for col in margin..w - margin {
            let set = &sets[row * w + col];
            let (gu, gv) = gt.at(row, col);
            let mut best = f64::INFINITY;
            for cand in &set.candidates {
                let du = cand.offset.0 as f64 - gu;
                let dv = cand.offset.1 as f64 - gv;
                let epe = (du * du + dv * dv).sqrt();
                if epe < best {
                    best = epe;
                }
            }
            total += best;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Results of the K-sweep study.
#[derive(Debug, Clone)]
pub struct KnnFlowReport {
    pub k_values: Vec<usize>,
    pub mean_epe: Vec<f64>,
    pub trials: usize,
    pub noise_sigma: f64,
}

/// Runs `trials` random translated-texture pairs (shifts sampled per trial
/// within the search range) and averages the best-of-K EPE for every K.
/// Trials run in parallel and are reduced in fixed trial order.
pub fn run_study(
    k_values: &[usize],
    noise_sigma: f64,
    trials: usize,
    seed: u64,
    d: usize,
    s: usize,
    size: usize,
) -> Result<KnnFlowReport> {
    if trials == 0 {
        return Err(Error::config("knnflow: trials must be >= 1"));
    }
    for &k in k_values {
        let window = (2 * d + 1) * (2 * d + 1);
        if k == 0 || k > window {
            return Err(Error::config(format!(
                "knnflow: K={k} outside 1..={window}"
            )));
        }
    }
    let max_shift = (d as i32 - 1).max(1);
    let per_trial: Vec<Result<Vec<f64>>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = SplitMix64::new(seed.wrapping_add(t as u64).wrapping_mul(0x9E37_79B9));
            let shift = (
                rng.next_i32(-max_shift, max_shift),
                rng.next_i32(-max_shift, max_shift),
            );
            let (a, b, gt) = synth_pair::<f32>(rng.next_u64(), shift, noise_sigma, size, size);
            k_values
                .iter()
                .map(|&k| best_of_k_epe(&a, &b, &gt, k, d, s))
                .collect()
        })
        .collect();
    let mut mean_epe = vec![0.0f64; k_values.len()];
    for trial in per_trial {
        for (acc, epe) in mean_epe.iter_mut().zip(trial?) {
            *acc += epe;
        }
    }
    for v in &mut mean_epe {
        *v /= trials as f64;
    }
    Ok(KnnFlowReport {
        k_values: k_values.to_vec(),
        mean_epe,
        trials,
        noise_sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::psnr;

    #[test]
    fn zero_shift_zero_noise_pair_is_identical() {
        let (a, b, gt) = synth_pair::<f64>(3, (0, 0), 0.0, 24, 24);
        assert_eq!(a, b);
        assert_eq!(gt.at(5, 5), (0.0, 0.0));
    }

    #[test]
    fn constant_flow_matches_shift() {
        let (_, _, gt) = synth_pair::<f64>(4, (2, 0), 0.0, 24, 24);
        for r in 0..24 {
            for c in 0..24 {
                assert_eq!(gt.at(r, c), (2.0, 0.0));
            }
        }
    }

    #[test]
    fn noise_level_yields_expected_psnr() {
        // PSNR(A translated, B) ~ 20*log10(1/sigma) = 26 dB at sigma 0.05
        let sigma = 0.05;
        let mut acc = 0.0;
        let n = 10;
        for seed in 0..n {
            let (a, b, _) = synth_pair::<f64>(100 + seed, (0, 0), sigma, 32, 32);
            acc += psnr(&a, &b).unwrap();
        }
        let mean = acc / n as f64;
        assert!((mean - 26.0).abs() < 1.0, "mean PSNR {mean}");
    }

    #[test]
    fn noiseless_integer_shift_has_zero_epe_at_k1() {
        for seed in [7u64, 8, 9] {
            let (a, b, gt) = synth_pair::<f64>(seed, (2, -1), 0.0, 24, 24);
            let epe = best_of_k_epe(&a, &b, &gt, 1, 5, 3).unwrap();
            assert_eq!(epe, 0.0, "seed {seed}");
        }
    }

    #[test]
    fn best_of_k_is_monotone_in_k() {
        for seed in 0..5u64 {
            let (a, b, gt) = synth_pair::<f64>(50 + seed, (1, 2), 0.15, 24, 24);
            let mut last = f64::INFINITY;
            for k in [1usize, 2, 4, 6] {
                let epe = best_of_k_epe(&a, &b, &gt, k, 5, 3).unwrap();
                assert!(epe <= last + 1e-12, "seed {seed} k {k}: {epe} > {last}");
                last = epe;
            }
        }
    }

    #[test]
    fn oversized_k_is_config_error() {
        let (a, b, gt) = synth_pair::<f64>(1, (0, 0), 0.0, 24, 24);
        assert!(matches!(
            best_of_k_epe(&a, &b, &gt, 200, 2, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn study_is_deterministic_for_fixed_seed() {
        let r1 = run_study(&[1, 2], 0.1, 4, 11, 5, 3, 24).unwrap();
        let r2 = run_study(&[1, 2], 0.1, 4, 11, 5, 3, 24).unwrap();
        assert_eq!(r1.mean_epe, r2.mean_epe);
    }
}
