//! Model hyperparameters and the `key = value` config file format.

use crate::error::{Error, Result};

/// All hyperparameters of the network and its loss.
///
/// `max_disp` is indexed by pyramid level: entry 0 is the full-resolution
/// level, entry 2 the coarsest, so the production setting {3, 5, 7} from low
/// to high resolution is stored as [7, 5, 3].
#[derive(Debug, Clone, PartialEq)]
pub struct MucanConfig {
    /// Temporal radius N; the network consumes 2N+1 frames.
    pub temporal_radius: usize,
    /// Feature channels C.
    pub channels: usize,
    /// Residual blocks in the feature extractor.
    pub feat_blocks: usize,
    /// Residual blocks in the reconstruction trunk.
    pub recon_blocks: usize,
    /// Patch size s for temporal matching (odd).
    pub patch_size: usize,
    /// Maximum displacement per level [d0, d1, d2].
    pub max_disp: [usize; 3],
    /// Number of aggregated correspondences K.
    pub top_k: usize,
    /// Cross-scale aggregation on/off (ablation axis).
    pub cncam_enabled: bool,
    /// Pixel-adaptive weights vs fixed 1/s^2 weights (ablation axis).
    pub tmcam_adaptive_weights: bool,
    /// Upscaling factor; fixed at 4.
    pub scale: usize,
    /// Weight-initialization seed.
    pub seed: u64,
    /// Edge-mask threshold.
    pub delta: f64,
    /// Edge-term coefficient.
    pub lambda: f64,
    /// Charbonnier constant.
    pub epsilon: f64,
}

impl Default for MucanConfig {
    /// Desk-scale defaults; the paper-scale settings (128 channels, 5/40
    /// blocks) remain expressible via the config file.
    fn default() -> Self {
        MucanConfig {
            temporal_radius: 2,
            channels: 8,
            feat_blocks: 2,
            recon_blocks: 4,
            patch_size: 3,
            max_disp: [7, 5, 3],
            top_k: 4,
            cncam_enabled: true,
            tmcam_adaptive_weights: true,
            scale: 4,
            seed: 7,
            delta: 0.1,
            lambda: 0.1,
            epsilon: 1e-3,
        }
    }
}

impl MucanConfig {
    pub fn frames(&self) -> usize {
        2 * self.temporal_radius + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("channels must be >= 1"));
        }
        if self.top_k == 0 {
            return Err(Error::config("top_k must be >= 1"));
        }
        if self.patch_size.is_multiple_of(2) {
            return Err(Error::config(format!(
                "patch_size {} must be odd",
                self.patch_size
            )));
        }
        if self.scale != 4 {
            return Err(Error::config(format!(
                "scale {} unsupported; this build only produces x4 output",
                self.scale
            )));
        }
        for (l, &d) in self.max_disp.iter().enumerate() {
            let window = (2 * d + 1) * (2 * d + 1);
            if self.top_k > window {
                return Err(Error::config(format!(
                    "top_k {} exceeds the {window}-candidate window at level {l}",
                    self.top_k
                )));
            }
        }
        Ok(())
    }

    /// Parses the `key = value` format; unknown keys are rejected. Blank
    /// lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = MucanConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            let parse_err = |what: &str| {
                Error::config(format!("line {}: bad {what} value `{value}`", lineno + 1))
            };
            match key {
                "temporal_radius" => {
                    config.temporal_radius =
                        value.parse().map_err(|_| parse_err("temporal_radius"))?
                }
                "channels" => config.channels = value.parse().map_err(|_| parse_err("channels"))?,
                "feat_blocks" => {
                    config.feat_blocks = value.parse().map_err(|_| parse_err("feat_blocks"))?
                }
                "recon_blocks" => {
                    config.recon_blocks = value.parse().map_err(|_| parse_err("recon_blocks"))?
                }
                "patch_size" => {
                    config.patch_size = value.parse().map_err(|_| parse_err("patch_size"))?
                }
                "max_disp" => {
                    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                    if parts.len() != 3 {
                        return Err(Error::config(format!(
                            "line {}: max_disp needs 3 comma-separated entries",
                            lineno + 1
                        )));
                    }
                    for (i, p) in parts.iter().enumerate() {
                        config.max_disp[i] = p.parse().map_err(|_| parse_err("max_disp"))?;
                    }
                }
                "top_k" => config.top_k = value.parse().map_err(|_| parse_err("top_k"))?,
                "cncam_enabled" => {
                    config.cncam_enabled = value.parse().map_err(|_| parse_err("cncam_enabled"))?
                }
                "tmcam_adaptive_weights" => {
                    config.tmcam_adaptive_weights = value
                        .parse()
                        .map_err(|_| parse_err("tmcam_adaptive_weights"))?
                }
                "scale" => config.scale = value.parse().map_err(|_| parse_err("scale"))?,
                "seed" => config.seed = value.parse().map_err(|_| parse_err("seed"))?,
                "delta" => config.delta = value.parse().map_err(|_| parse_err("delta"))?,
                "lambda" => config.lambda = value.parse().map_err(|_| parse_err("lambda"))?,
                "epsilon" => config.epsilon = value.parse().map_err(|_| parse_err("epsilon"))?,
                other => {
                    return Err(Error::config(format!(
                        "line {}: unknown key `{other}`",
                        lineno + 1
                    )))
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    /// Serializes in the same `key = value` format `parse` accepts.
    pub fn to_config_string(&self) -> String {
        format!(
            "temporal_radius = {}\nchannels = {}\nfeat_blocks = {}\nrecon_blocks = {}\n\
             patch_size = {}\nmax_disp = {},{},{}\ntop_k = {}\ncncam_enabled = {}\n\
             tmcam_adaptive_weights = {}\nscale = {}\nseed = {}\ndelta = {}\nlambda = {}\n\
             epsilon = {}\n",
            self.temporal_radius,
            self.channels,
            self.feat_blocks,
            self.recon_blocks,
            self.patch_size,
            self.max_disp[0],
            self.max_disp[1],
            self.max_disp[2],
            self.top_k,
            self.cncam_enabled,
            self.tmcam_adaptive_weights,
            self.scale,
            self.seed,
            self.delta,
            self.lambda,
            self.epsilon,
        )
    }
}
