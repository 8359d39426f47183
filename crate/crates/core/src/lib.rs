//! Workbench for unlearning corrupted training data from small classifiers.
//!
//! The crate is organized around a deterministic dense-network engine
//! ([`net`]), per-example binary masking over a memorization partition
//! ([`masking`]), corruption task generators ([`tasks`]), the REM unlearning
//! method and its baselines ([`unlearn`]), consistency-score estimation
//! ([`cscore`]), and a grid evaluation harness ([`bench`]).

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod cscore;
pub mod error;
pub mod loss;
pub mod masking;
pub mod net;
pub mod opt;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod unlearn;

pub use error::{Error, Result};
pub use tensor::Tensor;
