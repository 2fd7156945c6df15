//! Weight manifest, seeded initialization, and store validation.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::weights::WeightStore;

use super::config::MucanConfig;

/// Canonical list of (name, shape) pairs for a config. The manifest depends
/// only on the structural parameters, not on the ablation toggles, so
/// weights trained with a module disabled still load when it is re-enabled.
pub fn manifest(config: &MucanConfig) -> Vec<(String, Vec<usize>)> {
    let c = config.channels;
    let k = config.top_k;
    let s2 = config.patch_size * config.patch_size;
    let frames = config.frames();
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));

    push("enc.conv_in.w".into(), vec![c, 3, 3, 3]);
    push("enc.conv_in.b".into(), vec![c]);
    for i in 0..config.feat_blocks {
        push(format!("enc.res{i}.conv1.w"), vec![c, c, 3, 3]);
        push(format!("enc.res{i}.conv1.b"), vec![c]);
        push(format!("enc.res{i}.conv2.w"), vec![c, c, 3, 3]);
        push(format!("enc.res{i}.conv2.b"), vec![c]);
    }
    push("enc.down1.w".into(), vec![c, c, 3, 3]);
    push("enc.down1.b".into(), vec![c]);
    push("enc.down2.w".into(), vec![c, c, 3, 3]);
    push("enc.down2.b".into(), vec![c]);

    for group in ["tmcam", "tmcam_self"] {
        for l in 0..3 {
            push(format!("{group}.l{l}.aggr1.w"), vec![c, k * c, 1, 1]);
            push(format!("{group}.l{l}.aggr1.b"), vec![c]);
            push(format!("{group}.l{l}.aggr2.w"), vec![c, c, 1, 1]);
            push(format!("{group}.l{l}.aggr2.b"), vec![c]);
            push(format!("{group}.l{l}.wmap.w"), vec![s2, 2 * c, 3, 3]);
            push(format!("{group}.l{l}.wmap.b"), vec![s2]);
        }
        for l in 0..2 {
            push(format!("{group}.fuse{l}.w"), vec![c, 2 * c, 3, 3]);
            push(format!("{group}.fuse{l}.b"), vec![c]);
        }
    }

    push("fusion.w".into(), vec![4 * c, frames * c, 3, 3]);
    push("fusion.b".into(), vec![4 * c]);

    for s in 0..crate::cncam::SCALES {
        push(format!("cncam.att{s}.w"), vec![c, c, 1, 1]);
        push(format!("cncam.att{s}.b"), vec![c]);
    }
    push("cncam.aggr1.w".into(), vec![c, crate::cncam::SCALES * c, 1, 1]);
    push("cncam.aggr1.b".into(), vec![c]);
    push("cncam.aggr2.w".into(), vec![c, c, 1, 1]);
    push("cncam.aggr2.b".into(), vec![c]);

    for i in 0..config.recon_blocks {
        push(format!("recon.res{i}.conv1.w"), vec![c, c, 3, 3]);
        push(format!("recon.res{i}.conv1.b"), vec![c]);
        push(format!("recon.res{i}.conv2.w"), vec![c, c, 3, 3]);
        push(format!("recon.res{i}.conv2.b"), vec![c]);
    }
    push("recon.up.w".into(), vec![4 * c, c, 3, 3]);
    push("recon.up.b".into(), vec![4 * c]);
    push("recon.out.w".into(), vec![3, c, 3, 3]);
    push("recon.out.b".into(), vec![3]);

    out
}

/// The model: a config plus a weight store matching its manifest.
#[derive(Debug, Clone)]
pub struct MucanModel<S: Scalar> {
    config: MucanConfig,
    store: WeightStore<S>,
}

impl<S: Scalar> MucanModel<S> {
    /// Seeded initialization: one SplitMix64 stream per manifest tensor (in
    /// manifest order), weights uniform in +/-sqrt(1/fan_in), biases zero
    /// except the first Aggr mixing layers, whose biases start at +0.3 so
    /// the channel bottleneck begins in the linear regime of its activation.
    pub fn init(config: &MucanConfig) -> Result<Self> {
        config.validate()?;
        let mut master = SplitMix64::new(config.seed);
        let mut store = WeightStore::new();
        for (name, shape) in manifest(config) {
            let mut stream = master.split();
            let tensor = if shape.len() == 1 {
                if name.ends_with("aggr1.b") {
                    Tensor::full(&shape, S::from_f64(0.3))
                } else {
                    Tensor::zeros(&shape)
                }
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let range = (1.0 / fan_in as f64).sqrt();
                Tensor::random_uniform(&shape, range, &mut stream)
            };
            store.insert(name, tensor)?;
        }
        Ok(MucanModel {
            config: config.clone(),
            store,
        })
    }

    /// All-zero weights; with the global residual skip this makes the
    /// network reproduce the bilinear x4 center frame exactly.
    pub fn zeros(config: &MucanConfig) -> Result<Self> {
        config.validate()?;
        let mut store = WeightStore::new();
        for (name, shape) in manifest(config) {
            store.insert(name, Tensor::zeros(&shape))?;
        }
        Ok(MucanModel {
            config: config.clone(),
            store,
        })
    }

    /// Validates a loaded store against the manifest: every name must exist
    /// with the right shape, and no extra tensors are allowed.
    pub fn from_store(config: &MucanConfig, store: WeightStore<S>) -> Result<Self> {
        config.validate()?;
        let wanted = manifest(config);
        for (name, shape) in &wanted {
            match store.get(name) {
                None => {
                    return Err(Error::config(format!(
                        "weights missing tensor `{name}`"
                    )))
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::config(format!(
                        "weights tensor `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    )))
                }
                Some(_) => {}
            }
        }
        if store.len() != wanted.len() {
            let expected: std::collections::HashSet<&str> =
                wanted.iter().map(|(n, _)| n.as_str()).collect();
            let extra: Vec<&str> = store
                .names()
                .filter(|n| !expected.contains(n))
                .collect();
            return Err(Error::config(format!(
                "weights contain unexpected tensors: {extra:?}"
            )));
        }
        Ok(MucanModel {
            config: config.clone(),
            store,
        })
    }

    pub fn config(&self) -> &MucanConfig {
        &self.config
    }

    pub fn store(&self) -> &WeightStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut WeightStore<S> {
        &mut self.store
    }

    pub fn into_store(self) -> WeightStore<S> {
        self.store
    }
}
