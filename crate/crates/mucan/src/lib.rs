//! Correspondence-aggregation kernels for multi-frame video
//! super-resolution.
//!
//! The crate provides, from the bottom up:
//! - [`tensor`]: a dense row-major tensor plus the [`FeatureMap`] wrapper,
//!   generic over the [`Scalar`] precision (f32 runtime, f64 verification);
//! - [`ops`]: conv / pooling / shuffle / upsample building blocks with a
//!   thread-count-independent determinism contract;
//! - [`tmcam`]: temporal top-K patch correspondence search and
//!   pixel-adaptive aggregation;
//! - [`cncam`]: cross-scale nonlocal correspondence aggregation;
//! - [`autodiff`]: a minimal reverse-mode tape over the op set with a
//!   finite-difference gradient checker;
//! - [`loss`]: edge-aware training loss and PSNR/SSIM metrics;
//! - [`network`]: the full model assembly, weight manifest, and toy
//!   training harnesses;
//! - [`knnflow`]: the best-of-K patch-match flow study;
//! - [`reference`]: naive oracle kernels the optimized paths are checked
//!   against.

pub mod autodiff;
pub mod cncam;
pub mod error;
pub mod knnflow;
pub mod loss;
pub mod network;
pub mod ops;
pub mod reference;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod tmcam;
pub mod weights;

pub use error::{Error, Result};
pub use rng::SplitMix64;
pub use scalar::Scalar;
pub use tensor::{FeatureMap, Tensor};
pub use weights::WeightStore;

/// Runtime-precision aliases.
pub type Tensor32 = Tensor<f32>;
pub type FeatureMap32 = FeatureMap<f32>;
pub type WeightStore32 = WeightStore<f32>;

/// Verification-precision aliases (gradient checks run here).
pub type Tensor64 = Tensor<f64>;
pub type FeatureMap64 = FeatureMap<f64>;
pub type WeightStore64 = WeightStore<f64>;
