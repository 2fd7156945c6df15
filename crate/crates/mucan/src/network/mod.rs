//! Full-model assembly, configuration, weight manifest, and desk-scale
//! training harnesses.

mod config;
mod forward;
mod model;
mod train;

pub use config::MucanConfig;
pub use forward::{encode_pyramid, encode_pyramid_t, forward, forward_t, slope, weight_mode, TapedModel};
pub use model::{manifest, MucanModel};
pub use train::{
    cosine_lr, cosine_lr_from, downsample4, synth_shifted_pair, synth_shifted_pair_grain,
    synth_toy_clip, train_alignment_subpath, train_alignment_subpath_grain, train_toy, Adam,
    AlignmentSubpath, ToyClip, TrainResult, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, INITIAL_LR,
};
