//! Fixtures shared by the benchmarks.

use cpolab_core::cpo::CpoConditions;
use cpolab_core::denoiser::{Arch, Denoiser};
use cpolab_core::selfcheck::randomized_denoiser;
use ndarray::Array2;

pub const DATA_DIM: usize = 64;
pub const COND_WIDTH: usize = 10;
pub const STEPS: usize = 100;

pub fn arch() -> Arch {
    Arch::new(DATA_DIM, COND_WIDTH, STEPS)
}

pub fn model(seed: u64) -> Denoiser {
    randomized_denoiser(arch(), seed, 0.2)
}

/// Deterministic, loosely spread values; good enough as benchmark input.
pub fn filled(rows: usize, cols: usize, phase: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        ((i * cols + j) as f64 * 0.731 + phase).sin()
    })
}

pub fn timesteps(rows: usize) -> Vec<usize> {
    (0..rows).map(|i| 1 + (i * 37) % STEPS).collect()
}

pub fn conditions(rows: usize) -> CpoConditions {
    let c = |phase| filled(rows, COND_WIDTH, phase).mapv(|v: f64| if v > 0.3 { 1.0 } else { 0.0 });
    CpoConditions {
        c_pos: c(0.1),
        c_neg: c(0.2),
        c_all: c(0.3),
        c_null: Array2::zeros((rows, COND_WIDTH)),
        c_content: c(0.4),
    }
}
