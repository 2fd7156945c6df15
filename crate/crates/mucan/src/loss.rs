//! Edge-aware training loss and full-reference image quality metrics.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// BT.601 luma plane of a (3, H, W) image; a (1, H, W) image passes through.
pub fn luma<S: Scalar>(image: &Tensor<S>) -> Result<Tensor<S>> {
    image.expect_rank(3, "luma input")?;
    let (c_n, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    match c_n {
        1 => Tensor::new(vec![h, w], image.data().to_vec()),
        3 => {
            let (kr, kg, kb) = (
                S::from_f64(0.299),
                S::from_f64(0.587),
                S::from_f64(0.114),
            );
            let hw = h * w;
            let d = image.data();
            Ok(Tensor::from_fn(&[h, w], |p| {
                kr * d[p] + kg * d[hw + p] + kb * d[2 * hw + p]
            }))
        }
        other => Err(Error::shape(format!(
            "luma: expected 1 or 3 channels, got {other}"
        ))),
    }
}

/// 4-neighbor Laplacian response of a (H, W) plane with edge-replicate
/// padding: up + down + left + right - 4*center.
fn laplacian<S: Scalar>(plane: &Tensor<S>) -> Tensor<S> {
    let (h, w) = (plane.shape()[0], plane.shape()[1]);
    let d = plane.data();
    let four = S::from_f64(4.0);
    Tensor::from_fn(&[h, w], |p| {
        let (r, c) = (p / w, p % w);
        let up = d[r.saturating_sub(1) * w + c];
        let down = d[(r + 1).min(h - 1) * w + c];
        let left = d[r * w + c.saturating_sub(1)];
        let right = d[r * w + (c + 1).min(w - 1)];
        up + down + left + right - four * d[p]
    })
}

/// Binary edge map of an image: 1 where the absolute Laplacian response of
/// the luma plane reaches the threshold.
#[derive(Debug, Clone)]
pub struct EdgeMask<S: Scalar> {
    map: Tensor<S>,
    delta: S,
}

impl<S: Scalar> EdgeMask<S> {
    /// The (H, W) 0/1 map.
    pub fn map(&self) -> &Tensor<S> {
        &self.map
    }

    pub fn delta(&self) -> S {
        self.delta
    }

    /// Fraction of positions marked as edges.
    pub fn density(&self) -> f64 {
        let ones: f64 = self.map.data().iter().map(|v| v.as_f64()).sum();
        ones / self.map.len() as f64
    }
}

/// Edge mask of `hr_image` at threshold `delta` (applied to the absolute
/// Laplacian of the luma plane).
pub fn edge_mask<S: Scalar>(hr_image: &Tensor<S>, delta: S) -> Result<EdgeMask<S>> {
    if delta < S::zero() {
        return Err(Error::config("edge_mask: delta must be >= 0"));
    }
    let response = laplacian(&luma(hr_image)?);
    let map = response.map(|v| if v.abs() >= delta { S::one() } else { S::zero() });
    Ok(EdgeMask { map, delta })
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

/// Mean per-element Charbonnier penalty `sqrt((pred-target)^2 + eps^2)`.
pub fn charbonnier<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>, eps: S) -> Result<S> {
    expect_same_shape(pred, target, "charbonnier")?;
    if eps <= S::zero() {
        return Err(Error::config("charbonnier: eps must be > 0"));
    }
    let e2 = eps * eps;
    let mut acc = S::zero();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p - t;
        acc += (d * d + e2).sqrt();
    }
    Ok(acc / S::from_usize(pred.len()))
}

/// d charbonnier / d pred, scaled by `grad_out`.
pub fn charbonnier_backward<S: Scalar>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    eps: S,
    grad_out: S,
) -> Tensor<S> {
    let e2 = eps * eps;
    let inv_n = grad_out / S::from_usize(pred.len());
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            inv_n * d / (d * d + e2).sqrt()
        })
        .collect();
    Tensor::new(pred.shape().to_vec(), data).expect("same shape")
}

/// Charbonnier plus `lambda * mean(|B o (pred - target)|)` where B is the
/// target's edge mask broadcast across channels.
pub fn edge_aware_loss<S: Scalar>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    delta: S,
    lambda: S,
    eps: S,
) -> Result<S> {
    if lambda < S::zero() {
        return Err(Error::config("edge_aware_loss: lambda must be >= 0"));
    }
    let base = charbonnier(pred, target, eps)?;
    if lambda == S::zero() {
        return Ok(base);
    }
    let mask = edge_mask(target, delta)?;
    Ok(base + lambda * masked_l1(pred, target, mask.map()))
}

/// mean over all elements of |B o (pred - target)|, B broadcast per channel.
pub fn masked_l1<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>, mask: &Tensor<S>) -> S {
    let hw = mask.len();
    let mut acc = S::zero();
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        acc += mask.data()[i % hw] * (p - t).abs();
    }
    acc / S::from_usize(pred.len())
}

/// d edge_aware_loss / d pred with the mask held constant (it is piecewise
/// constant in the target), scaled by `grad_out`.
pub fn edge_aware_backward<S: Scalar>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    mask: &Tensor<S>,
    lambda: S,
    eps: S,
    grad_out: S,
) -> Tensor<S> {
    let mut grad = charbonnier_backward(pred, target, eps, grad_out);
    if lambda == S::zero() {
        return grad;
    }
    let hw = mask.len();
    let k = grad_out * lambda / S::from_usize(pred.len());
    for (i, g) in grad.data_mut().iter_mut().enumerate() {
        let d = pred.data()[i] - target.data()[i];
        let sign = if d > S::zero() {
            S::one()
        } else if d < S::zero() {
            -S::one()
        } else {
            S::zero()
        };
        *g += k * mask.data()[i % hw] * sign;
    }
    grad
}

/// Peak signal-to-noise ratio in dB for images in [0, 1]; identical images
/// report `f64::INFINITY`.
pub fn psnr<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    expect_same_shape(a, b, "psnr")?;
    let mut acc = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.as_f64() - y.as_f64();
        acc += d * d;
    }
    let mse = acc / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let x = i as f64 - half;
            (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable valid-mode Gaussian filter of a (H, W) f64 plane.
fn gaussian_filter_valid(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let kw = kernel.len();
    let ow = w - kw + 1;
    let oh = h - kw + 1;
    // horizontal pass
    let mut tmp = vec![0.0f64; h * ow];
    for r in 0..h {
        for c in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                acc += kv * plane[r * w + c + i];
            }
            tmp[r * ow + c] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0f64; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                acc += kv * tmp[(r + i) * ow + c];
            }
            out[r * ow + c] = acc;
        }
    }
    out
}

/// Mean structural similarity for images in [0, 1]: 11-tap Gaussian window
/// (sigma 1.5), K1 = 0.01, K2 = 0.03, computed per channel over the valid
/// region and averaged across channels.
pub fn ssim<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    expect_same_shape(a, b, "ssim")?;
    a.expect_rank(3, "ssim input")?;
    let (c_n, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::config(format!(
            "ssim: image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let kernel = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let hw = h * w;
    let mut total = 0.0f64;
    for c in 0..c_n {
        let x: Vec<f64> = a.data()[c * hw..(c + 1) * hw]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let y: Vec<f64> = b.data()[c * hw..(c + 1) * hw]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mu_x = gaussian_filter_valid(&x, h, w, &kernel);
        let mu_y = gaussian_filter_valid(&y, h, w, &kernel);
        let sxx = gaussian_filter_valid(&xx, h, w, &kernel);
        let syy = gaussian_filter_valid(&yy, h, w, &kernel);
        let sxy = gaussian_filter_valid(&xy, h, w, &kernel);
        let mut acc = 0.0f64;
        for i in 0..mu_x.len() {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let var_x = sxx[i] - mx * mx;
            let var_y = syy[i] - my * my;
            let cov = sxy[i] - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
        }
        total += acc / mu_x.len() as f64;
    }
    Ok(total / c_n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn rgb(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(&[3, h, w], |i| {
            let (hw, ww) = (h * w, w);
            f(i / hw, (i % hw) / ww, i % ww)
        })
    }

    #[test]
    fn edge_mask_constant_image_is_all_zero() {
        let img = Tensor::<f64>::full(&[3, 8, 8], 0.6);
        let mask = edge_mask(&img, 0.1).unwrap();
        assert!(mask.map().data().iter().all(|&v| v == 0.0));
        assert_eq!(mask.density(), 0.0);
    }

    #[test]
    fn edge_mask_vertical_step_marks_adjacent_columns() {
        // step 0 -> 1 at column 4 on all channels (luma step of 1)
        let img = rgb(6, 8, |_, _, c| if c >= 4 { 1.0 } else { 0.0 });
        let mask = edge_mask(&img, 0.1).unwrap();
        for r in 0..6 {
            for c in 0..8 {
                let expected = if c == 3 || c == 4 { 1.0 } else { 0.0 };
                assert_eq!(
                    mask.map().data()[r * 8 + c],
                    expected,
                    "row {r} col {c}"
                );
            }
        }
    }

    #[test]
    fn edge_mask_invariant_to_constant_shift() {
        let mut rng = SplitMix64::new(70);
        let img = Tensor::<f64>::random_uniform(&[3, 10, 10], 0.3, &mut rng)
            .map(|v| v + 0.5);
        let shifted = img.map(|v| v + 0.17);
        let m1 = edge_mask(&img, 0.1).unwrap();
        let m2 = edge_mask(&shifted, 0.1).unwrap();
        for (a, b) in m1.map().data().iter().zip(m2.map().data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn charbonnier_zero_residual_is_eps() {
        let img = Tensor::<f64>::full(&[3, 4, 4], 0.2);
        let loss = charbonnier(&img, &img, 1e-3).unwrap();
        assert!((loss - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn charbonnier_hand_value() {
        // uniform residual 0.3, eps 0.4 -> sqrt(0.09 + 0.16) = 0.5 per element
        let pred = Tensor::<f64>::full(&[2, 3, 3], 0.8);
        let target = Tensor::<f64>::full(&[2, 3, 3], 0.5);
        let loss = charbonnier(&pred, &target, 0.4).unwrap();
        assert!((loss - 0.5).abs() < 1e-12);
    }

    #[test]
    fn charbonnier_rejects_bad_args() {
        let a = Tensor::<f64>::zeros(&[2, 2]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(charbonnier(&a, &b, 1e-3), Err(Error::Shape(_))));
        assert!(matches!(charbonnier(&a, &a, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn edge_aware_equals_charbonnier_when_lambda_zero() {
        let mut rng = SplitMix64::new(71);
        let pred = Tensor::<f64>::random_uniform(&[3, 8, 8], 0.4, &mut rng).map(|v| v + 0.5);
        let target = Tensor::<f64>::random_uniform(&[3, 8, 8], 0.4, &mut rng).map(|v| v + 0.5);
        let l0 = edge_aware_loss(&pred, &target, 0.1, 0.0, 1e-3).unwrap();
        let lc = charbonnier(&pred, &target, 1e-3).unwrap();
        assert_eq!(l0, lc);
    }

    #[test]
    fn edge_aware_equals_charbonnier_for_constant_target() {
        let mut rng = SplitMix64::new(72);
        let pred = Tensor::<f64>::random_uniform(&[3, 8, 8], 0.4, &mut rng).map(|v| v + 0.5);
        let target = Tensor::<f64>::full(&[3, 8, 8], 0.5);
        for lambda in [0.1, 0.5, 3.0] {
            let l = edge_aware_loss(&pred, &target, 0.1, lambda, 1e-3).unwrap();
            let lc = charbonnier(&pred, &target, 1e-3).unwrap();
            assert_eq!(l, lc, "lambda {lambda}");
        }
    }

    #[test]
    fn edge_aware_closed_form_on_step_edge() {
        // step-edge target with uniform residual r: the extra term is
        // lambda * r * mask density
        let target = rgb(6, 8, |_, _, c| if c >= 4 { 1.0 } else { 0.0 });
        let r = 0.05;
        let pred = target.map(|v| v + r);
        let (delta, lambda, eps) = (0.1, 0.7, 1e-3);
        let loss = edge_aware_loss(&pred, &target, delta, lambda, eps).unwrap();
        let mask = edge_mask(&target, delta).unwrap();
        let expected = charbonnier(&pred, &target, eps).unwrap()
            + lambda * r * mask.density();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn psnr_basics() {
        let a = Tensor::<f64>::full(&[3, 4, 4], 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        let db = psnr(&a, &b).unwrap();
        assert!((db - 20.0).abs() < 1e-9, "{db}");
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn ssim_identical_is_one() {
        let mut rng = SplitMix64::new(73);
        let a = Tensor::<f64>::random_uniform(&[3, 16, 16], 0.5, &mut rng).map(|v| v + 0.5);
        let s = ssim(&a, &a).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "{s}");
    }

    #[test]
    fn ssim_inverted_high_contrast_is_low() {
        let a = rgb(16, 16, |_, r, c| if (r + c) % 2 == 0 { 1.0 } else { 0.0 });
        let b = a.map(|v| 1.0 - v);
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.5, "{s}");
    }

    #[test]
    fn ssim_decreases_monotonically_with_noise() {
        let mut rng = SplitMix64::new(74);
        let base = Tensor::<f64>::from_fn(&[3, 20, 20], |i| {
            0.5 + 0.3 * ((i % 20) as f64 * 0.7).sin()
        });
        let mut last = 1.1;
        for level in 1..=5 {
            let sigma = 0.02 * level as f64;
            let noisy = base.map(|v| (v + sigma * rng.normal()).clamp(0.0, 1.0));
            let s = ssim(&base, &noisy).unwrap();
            assert!(s < last, "level {level}: {s} !< {last}");
            last = s;
        }
    }

    #[test]
    fn ssim_symmetry_and_window_guard() {
        let mut rng = SplitMix64::new(75);
        let a = Tensor::<f64>::random_uniform(&[1, 14, 14], 0.5, &mut rng).map(|v| v + 0.5);
        let b = Tensor::<f64>::random_uniform(&[1, 14, 14], 0.5, &mut rng).map(|v| v + 0.5);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        let tiny = Tensor::<f64>::zeros(&[1, 8, 8]);
        assert!(matches!(ssim(&tiny, &tiny), Err(Error::Config(_))));
    }

    #[test]
    fn luma_weights() {
        let img = rgb(2, 2, |ch, _, _| if ch == 0 { 1.0 } else { 0.0 });
        let y = luma(&img).unwrap();
        assert!((y.data()[0] - 0.299).abs() < 1e-12);
    }
}
