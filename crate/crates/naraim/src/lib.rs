//! Autoregressive next-patch pre-training of a small vision transformer on
//! images kept in their native aspect ratio, plus the square-resize baseline
//! it is compared against.
//!
//! The crate is self-contained: a dense f64 tensor type with tape-based
//! reverse-mode autodiff, pixel-space preprocessing, positional embeddings
//! and prefix-causal attention masks, the transformer backbone with its
//! pre-training head and attentive classification probe, training loops with
//! AdamW and the warmup/decay schedules, evaluation reports, and a CLI over
//! all of it.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod embed;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod imaging;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ParamTree, Tensor};
