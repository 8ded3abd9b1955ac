//! Minimal numerics: dense/sparse matrix kernels, numerically stable
//! activations and losses, the AdamW step, a finite-difference gradient
//! oracle, and FLOP instrumentation.
//!
//! Everything is generic over [`Scalar`] so the same code runs in 32-bit
//! precision for training and 64-bit precision for gradient checks.

mod adamw;
mod gradcheck;
mod loss;
mod matrix;

pub use adamw::{AdamW, AdamWConfig, GroupId};
pub use gradcheck::{finite_difference_gradient, max_relative_error};
pub use loss::{bce_from_log_prob, log1mexp, log_sigmoid, sigmoid};
pub use matrix::{matmul, matmul_at_b, matmul_a_bt, sparse_dense_matmul, Matrix};

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

/// Floating point scalar usable by the numeric stack.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    /// Named to avoid clashing with `num_traits::ToPrimitive::to_f64`.
    fn widen(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn widen(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn widen(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("sparse index {index} out of range for {rows} matrix rows")]
    SparseIndexOutOfRange { index: u32, rows: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("NaN gradient in parameter group '{group}'")]
    NanGradient { group: String },
    #[error("log probability must be <= 0, got {0}")]
    PositiveLogProb(f64),
}

// Multiply-accumulate FLOPs (2 per MAC) of every matmul-class kernel since
// process start. Only matmul-class work is counted: dense products, the
// sparse-dense input product, and projections. Elementwise activations and
// reductions are excluded by convention so analytic per-batch counts can be
// asserted exactly against the instrumented value.
static FLOPS: AtomicU64 = AtomicU64::new(0);

pub(crate) fn add_flops(n: u64) {
    FLOPS.fetch_add(n, Ordering::Relaxed);
}

/// Total FLOPs counted so far; take deltas around a region to instrument it.
pub fn flop_count() -> u64 {
    FLOPS.load(Ordering::Relaxed)
}

/// Reset the global FLOP counter (tests and benchmarks).
pub fn reset_flop_count() {
    FLOPS.store(0, Ordering::Relaxed);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flop_counter_is_additive() {
        let a: Matrix<f64> = Matrix::zeros(3, 4);
        let b: Matrix<f64> = Matrix::zeros(4, 5);
        let c: Matrix<f64> = Matrix::zeros(5, 2);
        let before = flop_count();
        let ab = matmul(&a, &b).unwrap();
        let mid = flop_count();
        let _ = matmul(&ab, &c).unwrap();
        let after = flop_count();
        assert_eq!(mid - before, 2 * 3 * 4 * 5);
        assert_eq!(after - mid, 2 * 3 * 5 * 2);
        // Composite equals the sum of constituents.
        assert_eq!(after - before, 2 * 3 * 4 * 5 + 2 * 3 * 5 * 2);
    }
}
