//! PNG <-> tensor conversion shared by the subcommands.

use std::path::{Path, PathBuf};

use mucan::{Tensor, Tensor32};

/// Decodes an 8-bit RGB PNG into a (3, H, W) tensor in [0, 1].
pub fn load_rgb(path: &Path) -> Result<Tensor32, String> {
    let img = image::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, rest) = (i / (h * w), i % (h * w));
        raw[rest * 3 + c] as f32 / 255.0
    }))
}

/// Clamps to [0, 1] and writes an 8-bit RGB PNG.
pub fn save_rgb(path: &Path, tensor: &Tensor32) -> Result<(), String> {
    let (c_n, h, w) = (
        tensor.shape()[0],
        tensor.shape()[1],
        tensor.shape()[2],
    );
    if c_n != 3 {
        return Err(format!("expected 3 channels, got {c_n}"));
    }
    let mut raw = vec![0u8; h * w * 3];
    for c in 0..3 {
        for p in 0..h * w {
            let v = tensor.data()[c * h * w + p].clamp(0.0, 1.0);
            raw[p * 3 + c] = (v * 255.0).round() as u8;
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .expect("buffer matches dimensions");
    img.save(path).map_err(|e| format!("{}: {e}", path.display()))
}

/// PNG files of a directory, sorted by file name.
pub fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>, String> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    Ok(files)
}
