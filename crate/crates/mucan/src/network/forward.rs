//! Full-model assembly: encoder pyramids, per-frame TM-CAM alignment,
//! fusion + depth-to-space, CN-CAM, reconstruction trunk, and the global
//! bilinear skip.

use std::collections::HashMap;

use crate::autodiff::{Tape, ValueId};
use crate::cncam;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Tensor};
use crate::tmcam;

use super::config::MucanConfig;
use super::model::{manifest, MucanModel};

/// Activation slope used throughout the network.
pub fn slope<S: Scalar>() -> S {
    S::from_f64(0.1)
}

/// Weight-column mode implied by the config's adaptive-weights toggle.
pub fn weight_mode(config: &MucanConfig) -> tmcam::WeightMode {
    if config.tmcam_adaptive_weights {
        tmcam::WeightMode::Adaptive
    } else {
        tmcam::WeightMode::Uniform
    }
}

/// The model's tensors registered as tape leaves, addressable by name.
pub struct TapedModel {
    ids: HashMap<String, ValueId>,
    order: Vec<String>,
}

impl TapedModel {
    pub fn register<S: Scalar>(tape: &mut Tape<S>, model: &MucanModel<S>) -> Self {
        let mut ids = HashMap::new();
        let mut order = Vec::new();
        for (name, _) in manifest(model.config()) {
            let tensor = model
                .store()
                .get(&name)
                .expect("validated store covers the manifest")
                .clone();
            ids.insert(name.clone(), tape.leaf(tensor));
            order.push(name);
        }
        TapedModel { ids, order }
    }

    pub fn id(&self, name: &str) -> ValueId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("tensor `{name}` not in manifest"))
    }

    /// Names in manifest order.
    pub fn names(&self) -> &[String] {
        &self.order
    }

    pub fn tmcam_ids(&self, group: &str) -> tmcam::taped::TmcamParamIds {
        tmcam::taped::TmcamParamIds {
            levels: (0..3)
                .map(|l| tmcam::taped::LevelParamIds {
                    aggr_w1: self.id(&format!("{group}.l{l}.aggr1.w")),
                    aggr_b1: self.id(&format!("{group}.l{l}.aggr1.b")),
                    aggr_w2: self.id(&format!("{group}.l{l}.aggr2.w")),
                    aggr_b2: self.id(&format!("{group}.l{l}.aggr2.b")),
                    wmap_w: self.id(&format!("{group}.l{l}.wmap.w")),
                    wmap_b: self.id(&format!("{group}.l{l}.wmap.b")),
                })
                .collect(),
            fuse: (0..2)
                .map(|l| {
                    (
                        self.id(&format!("{group}.fuse{l}.w")),
                        self.id(&format!("{group}.fuse{l}.b")),
                    )
                })
                .collect(),
        }
    }

    pub fn cncam_ids(&self) -> cncam::taped::CncamParamIds {
        cncam::taped::CncamParamIds {
            att: (0..cncam::SCALES)
                .map(|s| {
                    (
                        self.id(&format!("cncam.att{s}.w")),
                        self.id(&format!("cncam.att{s}.b")),
                    )
                })
                .collect(),
            aggr_w1: self.id("cncam.aggr1.w"),
            aggr_b1: self.id("cncam.aggr1.b"),
            aggr_w2: self.id("cncam.aggr2.w"),
            aggr_b2: self.id("cncam.aggr2.b"),
        }
    }
}

pub(super) fn residual_block_t<S: Scalar>(
    tape: &mut Tape<S>,
    x: ValueId,
    w1: ValueId,
    b1: ValueId,
    w2: ValueId,
    b2: ValueId,
) -> Result<ValueId> {
    let h = tape.conv2d(x, w1, b1, 1, 1)?;
    let a = tape.leaky_relu(h, slope());
    let y = tape.conv2d(a, w2, b2, 1, 1)?;
    tape.add(x, y)
}

/// Encoder: conv-in + residual blocks at full resolution, then two stride-2
/// convs for levels 1 and 2. Every level ends in the activation, so the
/// features the aggregation units consume sit mostly in the positive regime
/// where a leaky-relu bottleneck passes values through cleanly.
pub fn encode_pyramid_t<S: Scalar>(
    tape: &mut Tape<S>,
    frame: ValueId,
    ids: &TapedModel,
    config: &MucanConfig,
) -> Result<[ValueId; 3]> {
    let x = tape.conv2d(frame, ids.id("enc.conv_in.w"), ids.id("enc.conv_in.b"), 1, 1)?;
    let mut trunk = tape.leaky_relu(x, slope());
    for i in 0..config.feat_blocks {
        trunk = residual_block_t(
            tape,
            trunk,
            ids.id(&format!("enc.res{i}.conv1.w")),
            ids.id(&format!("enc.res{i}.conv1.b")),
            ids.id(&format!("enc.res{i}.conv2.w")),
            ids.id(&format!("enc.res{i}.conv2.b")),
        )?;
    }
    let l0 = tape.leaky_relu(trunk, slope());
    let d1 = tape.conv2d(l0, ids.id("enc.down1.w"), ids.id("enc.down1.b"), 2, 1)?;
    let l1 = tape.leaky_relu(d1, slope());
    let d2 = tape.conv2d(l1, ids.id("enc.down2.w"), ids.id("enc.down2.b"), 2, 1)?;
    let l2 = tape.leaky_relu(d2, slope());
    Ok([l0, l1, l2])
}

fn validate_frames<S: Scalar>(frames: &[&Tensor<S>], config: &MucanConfig) -> Result<(usize, usize)> {
    if frames.len() != config.frames() {
        return Err(Error::config(format!(
            "expected {} frames (2N+1 with N={}), got {}",
            config.frames(),
            config.temporal_radius,
            frames.len()
        )));
    }
    let first = frames[0];
    first.expect_rank(3, "input frame")?;
    let (c, h, w) = (first.shape()[0], first.shape()[1], first.shape()[2]);
    if c != 3 {
        return Err(Error::shape(format!("frames must have 3 channels, got {c}")));
    }
    for f in frames {
        if f.shape() != first.shape() {
            return Err(Error::shape(format!(
                "frame size mismatch: {:?} vs {:?}",
                f.shape(),
                first.shape()
            )));
        }
    }
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(Error::config(format!(
            "frame extents {h}x{w} must be positive multiples of 4"
        )));
    }
    Ok((h, w))
}

/// Full forward pass on an existing tape. `frame_ids` are the 2N+1 input
/// frames in temporal order; the center frame is the reference.
pub fn forward_t<S: Scalar>(
    tape: &mut Tape<S>,
    frame_ids: &[ValueId],
    ids: &TapedModel,
    config: &MucanConfig,
) -> Result<ValueId> {
    let n = config.temporal_radius;
    let center = n;
    let mut pyramids = Vec::with_capacity(frame_ids.len());
    for &f in frame_ids {
        pyramids.push(encode_pyramid_t(tape, f, ids, config)?);
    }
    let neighbor_params = ids.tmcam_ids("tmcam");
    let self_params = ids.tmcam_ids("tmcam_self");
    let mut aligned = Vec::with_capacity(frame_ids.len());
    for (i, pyr) in pyramids.iter().enumerate() {
        let params = if i == center { &self_params } else { &neighbor_params };
        aligned.push(tmcam::taped::tmcam_align(
            tape,
            &pyramids[center],
            pyr,
            params,
            config.patch_size,
            &config.max_disp,
            config.top_k,
            weight_mode(config),
            slope(),
        )?);
    }
    let cat = tape.concat_channels(&aligned)?;
    let fused = tape.conv2d(cat, ids.id("fusion.w"), ids.id("fusion.b"), 1, 1)?;
    let mut x = tape.pixel_shuffle(fused, 2)?;
    if config.cncam_enabled {
        x = cncam::taped::cncam_aggregate(tape, x, &ids.cncam_ids(), slope())?;
    }
    for i in 0..config.recon_blocks {
        x = residual_block_t(
            tape,
            x,
            ids.id(&format!("recon.res{i}.conv1.w")),
            ids.id(&format!("recon.res{i}.conv1.b")),
            ids.id(&format!("recon.res{i}.conv2.w")),
            ids.id(&format!("recon.res{i}.conv2.b")),
        )?;
    }
    let up = tape.conv2d(x, ids.id("recon.up.w"), ids.id("recon.up.b"), 1, 1)?;
    let hi = tape.pixel_shuffle(up, 2)?;
    let rgb = tape.conv2d(hi, ids.id("recon.out.w"), ids.id("recon.out.b"), 1, 1)?;
    // global residual skip: bilinear x4 of the center frame
    let up2 = tape.bilinear_upsample2(frame_ids[center])?;
    let up4 = tape.bilinear_upsample2(up2)?;
    tape.add(rgb, up4)
}

/// Inference entry point: predicts the x4 center frame from 2N+1 frames.
/// Output is (3, 4H, 4W), unclamped (clamping happens at image export).
pub fn forward<S: Scalar>(frames: &[Tensor<S>], model: &MucanModel<S>) -> Result<Tensor<S>> {
    let refs: Vec<&Tensor<S>> = frames.iter().collect();
    validate_frames(&refs, model.config())?;
    let mut tape = Tape::inference();
    let ids = TapedModel::register(&mut tape, model);
    let frame_ids: Vec<ValueId> = frames.iter().map(|f| tape.leaf(f.clone())).collect();
    let out = forward_t(&mut tape, &frame_ids, &ids, model.config())?;
    Ok(tape.value(out).clone())
}

/// Standalone encoder: the 3-level feature pyramid of one frame, with level
/// metadata attached.
pub fn encode_pyramid<S: Scalar>(
    frame: &Tensor<S>,
    model: &MucanModel<S>,
    frame_time: i32,
) -> Result<Vec<FeatureMap<S>>> {
    frame.expect_rank(3, "encode_pyramid frame")?;
    let mut tape = Tape::inference();
    let ids = TapedModel::register(&mut tape, model);
    let f = tape.leaf(frame.clone());
    let levels = encode_pyramid_t(&mut tape, f, &ids, model.config())?;
    levels
        .iter()
        .enumerate()
        .map(|(l, &id)| FeatureMap::new(tape.value(id).clone(), l, frame_time))
        .collect()
}
