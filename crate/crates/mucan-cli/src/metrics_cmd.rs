//! `metrics`: per-frame and mean PSNR/SSIM between two frame directories.

use std::path::Path;

use mucan::loss::{luma, psnr, ssim};
use mucan::Tensor32;

use crate::images;

fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

fn as_metric_pair(a: &Tensor32, b: &Tensor32, use_luma: bool) -> Result<(Tensor32, Tensor32), String> {
    if !use_luma {
        return Ok((a.clone(), b.clone()));
    }
    let to_luma = |t: &Tensor32| -> Result<Tensor32, String> {
        let plane = luma(t).map_err(|e| e.to_string())?;
        let (h, w) = (plane.shape()[0], plane.shape()[1]);
        Ok(Tensor32::new(vec![1, h, w], plane.into_data()).expect("same length"))
    };
    Ok((to_luma(a)?, to_luma(b)?))
}

pub fn run(reference: &Path, test: &Path, use_luma: bool) -> u8 {
    let ref_files = match images::sorted_pngs(reference) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("mucan metrics: {e}");
            return 4;
        }
    };
    let test_files = match images::sorted_pngs(test) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("mucan metrics: {e}");
            return 4;
        }
    };
    if ref_files.is_empty() || ref_files.len() != test_files.len() {
        eprintln!(
            "mucan metrics: directories must hold the same nonzero number of PNGs ({} vs {})",
            ref_files.len(),
            test_files.len()
        );
        return 4;
    }
    let mut psnr_acc = 0.0f64;
    let mut ssim_acc = 0.0f64;
    let n = ref_files.len();
    for (rf, tf) in ref_files.iter().zip(&test_files) {
        let (a, b) = match (images::load_rgb(rf), images::load_rgb(tf)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                eprintln!("mucan metrics: bad image: {e}");
                return 4;
            }
        };
        let (a, b) = match as_metric_pair(&a, &b, use_luma) {
            Ok(v) => v,
            Err(e) => {
                eprintln!("mucan metrics: {e}");
                return 4;
            }
        };
        let (p, s) = match (psnr(&a, &b), ssim(&a, &b)) {
            (Ok(p), Ok(s)) => (p, s),
            (Err(e), _) | (_, Err(e)) => {
                eprintln!("mucan metrics: {e}");
                return 1;
            }
        };
        let name = rf.file_name().and_then(|s| s.to_str()).unwrap_or("?");
        println!("{name}\t{}\t{s:.5}", format_db(p));
        psnr_acc += p;
        ssim_acc += s;
    }
    println!(
        "mean\t{}\t{:.5}",
        format_db(psnr_acc / n as f64),
        ssim_acc / n as f64
    );
    0
}
