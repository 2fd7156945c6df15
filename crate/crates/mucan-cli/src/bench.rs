//! `bench`: naive oracle vs optimized kernel timings with an equivalence
//! gate.

use std::time::Instant;

use mucan::cncam::{build_pyramid, nonlocal_nn, nonlocal_nn_map};
use mucan::reference::top_k_volume_naive;
use mucan::tmcam::top_k_volume;
use mucan::{SplitMix64, Tensor};

use crate::BenchKernel;

fn parse_size(size: &str) -> Result<(usize, usize), String> {
    let (h, w) = size
        .split_once('x')
        .ok_or_else(|| format!("size `{size}` is not HxW"))?;
    let h = h.parse().map_err(|_| format!("bad height in `{size}`"))?;
    let w = w.parse().map_err(|_| format!("bad width in `{size}`"))?;
    Ok((h, w))
}

/// Best-of-3 wall time of `f`.
fn best_time<T>(mut f: impl FnMut() -> T) -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..3 {
        let start = Instant::now();
        std::hint::black_box(f());
        best = best.min(start.elapsed().as_secs_f64());
    }
    best
}

pub fn run(
    kernel: BenchKernel,
    size: &str,
    channels: usize,
    disp: usize,
    top_k: usize,
    patch: usize,
    seed: u64,
) -> u8 {
    let (h, w) = match parse_size(size) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("mucan bench: {e}");
            return 1;
        }
    };
    let mut rng = SplitMix64::new(seed);
    match kernel {
        BenchKernel::Corr => {
            let reference = Tensor::<f32>::random_uniform(&[channels, h, w], 1.0, &mut rng);
            let neighbor = Tensor::<f32>::random_uniform(&[channels, h, w], 1.0, &mut rng);
            let fast = match top_k_volume(&reference, &neighbor, patch, disp, top_k) {
                Ok(v) => v,
                Err(e) => {
                    eprintln!("mucan bench: {e}");
                    return 1;
                }
            };
            let slow = top_k_volume_naive(&reference, &neighbor, patch, disp, top_k)
                .expect("same arguments");
            for (a, b) in fast.iter().zip(&slow) {
                if a.candidates.len() != b.candidates.len()
                    || a.candidates.iter().zip(&b.candidates).any(|(x, y)| {
                        x.offset != y.offset
                            || (x.score - y.score).abs()
                                > 1e-6 * x.score.abs().max(y.score.abs()).max(1.0)
                    })
                {
                    eprintln!(
                        "mucan bench: equivalence failure at position {:?}",
                        a.position
                    );
                    return 5;
                }
            }
            let positions = (h * w) as f64;
            let t_fast =
                best_time(|| top_k_volume(&reference, &neighbor, patch, disp, top_k).unwrap());
            let t_slow = best_time(|| {
                top_k_volume_naive(&reference, &neighbor, patch, disp, top_k).unwrap()
            });
            let speedup = t_slow / t_fast;
            println!("kernel\tcorr\tpositions\t{}", h * w);
            println!("naive_ns_per_pos\t{:.1}", t_slow * 1e9 / positions);
            println!("optimized_ns_per_pos\t{:.1}", t_fast * 1e9 / positions);
            println!("speedup\t{speedup:.2}");
            if speedup < 1.0 {
                eprintln!("mucan bench: optimized kernel slower than the naive oracle");
                return 1;
            }
        }
        BenchKernel::Nnsearch => {
            let m0 = Tensor::<f32>::random_uniform(&[channels, h, w], 1.0, &mut rng);
            let pyramid = build_pyramid(&m0).expect("rank-3 map");
            let fast = match nonlocal_nn_map(&pyramid, patch) {
                Ok(v) => v,
                Err(e) => {
                    eprintln!("mucan bench: {e}");
                    return 1;
                }
            };
            for row in 0..h {
                for col in 0..w {
                    let slow = nonlocal_nn(&pyramid, (row, col), patch).expect("in bounds");
                    for (s_idx, m) in slow.iter().enumerate() {
                        let got = fast[row * w + col][s_idx];
                        if (m.position.0 as u32, m.position.1 as u32) != got {
                            eprintln!(
                                "mucan bench: equivalence failure at query ({row},{col}) scale {}",
                                m.scale
                            );
                            return 5;
                        }
                    }
                }
            }
            let queries = (h * w) as f64;
            let t_fast = best_time(|| nonlocal_nn_map(&pyramid, patch).unwrap());
            let t_slow = best_time(|| {
                for row in 0..h {
                    for col in 0..w {
                        std::hint::black_box(
                            nonlocal_nn(&pyramid, (row, col), patch).expect("in bounds"),
                        );
                    }
                }
            });
            let speedup = t_slow / t_fast;
            println!("kernel\tnnsearch\tqueries\t{}", h * w);
            println!("naive_ns_per_query\t{:.1}", t_slow * 1e9 / queries);
            println!("optimized_ns_per_query\t{:.1}", t_fast * 1e9 / queries);
            println!("speedup\t{speedup:.2}");
            if speedup < 1.0 {
                eprintln!("mucan bench: optimized kernel slower than the naive oracle");
                return 1;
            }
        }
    }
    0
}
