//! Minimal dense numerical stack: matrices, named parameter collections,
//! deterministic initialization, Adamax, and a finite-difference gradient
//! checker. Everything is f64 and CPU-only by design.

mod gemm;
mod gradcheck;
mod matrix;
mod optim;
mod params;
pub mod rng;

pub use gemm::{col_sums_acc, gemm_atx_acc, gemm_xw, gemm_xwt_bias};
pub use gradcheck::{grad_check, grad_check_generic};
pub use matrix::{dot, linear_forward, Matrix};
pub use optim::{adamax_step, OptimizerState};
pub use params::{
    init_params, init_zero_grads, load_params, save_params, LayerParams, ParamGrads, Params,
};
