//! `knnflow`: mean best-of-K end-point error as K grows.

use std::path::Path;

use mucan::knnflow::run_study;

#[allow(clippy::too_many_arguments)]
pub fn run(
    k_values: &[usize],
    noise: f64,
    trials: usize,
    seed: u64,
    disp: usize,
    patch: usize,
    size: usize,
    csv: Option<&Path>,
) -> u8 {
    let report = match run_study(k_values, noise, trials, seed, disp, patch, size) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("mucan knnflow: {e}");
            return 1;
        }
    };
    println!("k\tmean_epe");
    for (k, epe) in report.k_values.iter().zip(&report.mean_epe) {
        println!("{k}\t{epe:.6}");
    }
    if let Some(path) = csv {
        let mut text = String::from("k,mean_epe\n");
        for (k, epe) in report.k_values.iter().zip(&report.mean_epe) {
            text.push_str(&format!("{k},{epe}\n"));
        }
        if let Err(e) = std::fs::write(path, text) {
            eprintln!("mucan knnflow: cannot write csv: {e}");
            return 1;
        }
    }
    0
}
