//! From-scratch streaming keyword-spotting engine.
//!
//! The crate covers the full desk-scale pipeline: LFBE audio features, a
//! convolutional-recurrent model with scaled dot-product attention, training
//! with hand-derived gradients checked against finite differences, two
//! provably equivalent streaming inference runtimes, and DET/endpoint/latency
//! evaluation.
//!
//! The `parallel` feature (on by default) runs batch-level work on rayon;
//! without it everything falls back to sequential iterators with
//! bit-identical results.

pub mod error;
pub mod eval;
pub mod features;
pub mod nn;
pub mod par;
pub mod streaming;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{KwsError, Result};
