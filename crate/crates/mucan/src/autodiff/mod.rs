//! Minimal reverse-mode differentiation over the library's op set plus a
//! finite-difference verification harness.

mod gradcheck;
mod tape;

pub use gradcheck::{
    grad_check, grad_check_sweep, registered_ops, GradCheckReport, OpCheck, FD_STEP, GRAD_TOL,
    TIE_TOL,
};
pub use tape::{BackwardCtx, Gradients, Tape, ValueId};
