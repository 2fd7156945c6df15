//! `train-toy`: overfit the network on one synthetic clip.

use std::path::Path;

use mucan::loss::psnr;
use mucan::network::{forward, synth_toy_clip, train_toy, MucanConfig, MucanModel};

pub fn run(
    config: Option<&Path>,
    iters: usize,
    seed: u64,
    size: usize,
    out: Option<&Path>,
    trace: Option<&Path>,
) -> u8 {
    let config = match config {
        None => MucanConfig::default(),
        Some(p) => {
            let text = match std::fs::read_to_string(p) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("mucan train-toy: {}: {e}", p.display());
                    return 1;
                }
            };
            match MucanConfig::parse(&text) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("mucan train-toy: {e}");
                    return 1;
                }
            }
        }
    };
    let clip = match synth_toy_clip::<f32>(&config, seed, size, size) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("mucan train-toy: {e}");
            return 1;
        }
    };
    let init_model = match MucanModel::<f32>::init(&config) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("mucan train-toy: {e}");
            return 1;
        }
    };
    let baseline = forward(&clip.frames, &init_model).and_then(|p| psnr(&p, &clip.target));
    let result = match train_toy(&clip, &config, iters) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("mucan train-toy: {e}");
            return 1;
        }
    };
    let every = (iters / 20).max(1);
    for (i, loss) in result.loss_trace.iter().enumerate() {
        if i % every == 0 || i + 1 == iters {
            println!("iter\t{i}\tloss\t{loss:.6}");
        }
    }
    let initial = result.loss_trace[0];
    let last = *result.loss_trace.last().expect("non-empty trace");
    println!("initial_loss\t{initial:.6}");
    println!("final_loss\t{last:.6}");
    println!("loss_ratio\t{:.6}", last / initial);
    let trained = MucanModel::from_store(&config, result.weights.clone()).expect("own manifest");
    if let (Ok(base_db), Ok(pred)) = (baseline, forward(&clip.frames, &trained)) {
        let final_db = psnr(&pred, &clip.target).unwrap_or(f64::NAN);
        println!("psnr_iter0\t{base_db:.3}");
        println!("psnr_final\t{final_db:.3}");
        println!("psnr_gain\t{:.3}", final_db - base_db);
    }
    if let Some(path) = trace {
        let mut csv = String::from("iter,loss\n");
        for (i, loss) in result.loss_trace.iter().enumerate() {
            csv.push_str(&format!("{i},{loss}\n"));
        }
        if let Err(e) = std::fs::write(path, csv) {
            eprintln!("mucan train-toy: cannot write trace: {e}");
            return 1;
        }
    }
    if let Some(path) = out {
        if let Err(e) = result.weights.save(path) {
            eprintln!("mucan train-toy: cannot save weights: {e}");
            return 1;
        }
        println!("weights\t{}", path.display());
    }
    0
}
