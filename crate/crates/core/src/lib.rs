//! Convolution by lowering: im2col patch matrices, GEMM-backed engines, and
//! the linear CNN/FC equivalence experiment built on them.
//!
//! Tensors are `f64`, row-major NHWC. A filter bank is `(f, kh, kw, c_in)`.

pub mod bench;
pub mod cli;
pub mod data;
pub mod dump;
pub mod engines;
pub mod error;
pub mod experiment;
pub mod gemm;
pub mod geometry;
pub mod lowering;
pub mod nn;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The crate-wide deterministic generator.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
