//! Drift-aware activation reuse for masked-diffusion language models.
//!
//! The crate carries a small bi-directional transformer ([`model`]), the
//! drift-scoring and per-layer budget machinery ([`drift`]), the two reuse
//! policies over key/value projections and attention outputs ([`reuse`]),
//! a block-wise masked-diffusion sampler with a maximally coupled paired mode
//! ([`sampler`]), executable error bounds for the single-layer regime
//! ([`theory`]), and redundancy/FLOP diagnostics ([`analysis`]).
//!
//! [`pipeline`] strings these together into the calibration, generation,
//! verification and sweep workflows the command-line tool exposes.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x >= 0.0)` also rejects NaN

pub mod analysis;
pub mod drift;
pub mod error;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod reuse;
pub mod sampler;
pub mod theory;

pub use error::{DareError, Result};
pub use linalg::Matrix;
