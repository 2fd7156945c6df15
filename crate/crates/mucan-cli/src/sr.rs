//! `sr`: sliding-window x4 upscaling of a frame directory.

use std::path::Path;

use mucan::network::{forward, MucanConfig, MucanModel};
use mucan::{Tensor32, WeightStore};

use crate::images;

fn load_config(path: Option<&Path>) -> Result<MucanConfig, String> {
    match path {
        None => Ok(MucanConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            MucanConfig::parse(&text).map_err(|e| e.to_string())
        }
    }
}

/// Input frames named frame_%04d.png, sorted by index.
fn input_frames(dir: &Path) -> Result<Vec<(usize, std::path::PathBuf)>, String> {
    let mut frames = Vec::new();
    for path in images::sorted_pngs(dir)? {
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some(digits) = stem.strip_prefix("frame_") {
            if digits.len() == 4 && digits.chars().all(|c| c.is_ascii_digit()) {
                frames.push((digits.parse().expect("4 digits"), path));
            }
        }
    }
    frames.sort();
    Ok(frames)
}

pub fn run(config: Option<&Path>, weights: &Path, input: &Path, output: &Path) -> u8 {
    let config = match load_config(config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("mucan sr: {e}");
            return 1;
        }
    };
    let store = match WeightStore::<f32>::load(weights) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("mucan sr: cannot load weights: {e}");
            return 3;
        }
    };
    let model = match MucanModel::from_store(&config, store) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("mucan sr: weights do not match the config: {e}");
            return 3;
        }
    };
    let listed = match input_frames(input) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("mucan sr: {e}");
            return 4;
        }
    };
    let needed = config.frames();
    if listed.len() < needed {
        eprintln!(
            "mucan sr: need at least {needed} frames (2N+1 with N={}), found {}",
            config.temporal_radius,
            listed.len()
        );
        return 4;
    }
    let mut frames: Vec<Tensor32> = Vec::with_capacity(listed.len());
    for (_, path) in &listed {
        match images::load_rgb(path) {
            Ok(t) => frames.push(t),
            Err(e) => {
                eprintln!("mucan sr: bad image: {e}");
                return 4;
            }
        }
    }
    if let Err(e) = std::fs::create_dir_all(output) {
        eprintln!("mucan sr: cannot create {}: {e}", output.display());
        return 1;
    }
    let n = config.temporal_radius as i64;
    let count = frames.len() as i64;
    for center in 0..count {
        // sequence edges replicate the first/last frame
        let window: Vec<Tensor32> = (-n..=n)
            .map(|dt| frames[(center + dt).clamp(0, count - 1) as usize].clone())
            .collect();
        let result = match forward(&window, &model) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("mucan sr: forward failed on frame {center}: {e}");
                return 1;
            }
        };
        let out_path = output.join(format!("out_{center:04}.png"));
        if let Err(e) = images::save_rgb(&out_path, &result) {
            eprintln!("mucan sr: cannot write output: {e}");
            return 1;
        }
        println!("out_{center:04}.png\t{}x{}", result.shape()[2], result.shape()[1]);
    }
    0
}
