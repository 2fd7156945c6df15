//! `gradcheck`: one report line per registered differentiable op.

use mucan::autodiff::{grad_check_sweep, registered_ops};

pub fn run(seeds: usize, seed: u64) -> u8 {
    let mut all_pass = true;
    for op in registered_ops() {
        match grad_check_sweep(&op, seed, seeds.max(1)) {
            Ok(report) => {
                println!(
                    "{}\t{:.3e}\t{}",
                    report.op,
                    report.max_rel_err,
                    if report.pass { "PASS" } else { "FAIL" }
                );
                all_pass &= report.pass;
            }
            Err(e) => {
                println!("{}\t-\tFAIL ({e})", op.name);
                all_pass = false;
            }
        }
    }
    if all_pass {
        0
    } else {
        1
    }
}
