//! Implicit next-scale autoregressive image generation.
//!
//! A coarse-to-fine token generator whose middle stack is one weight-tied
//! equilibrium layer, solved by fixed-point iteration, trained with
//! stochastic Jacobian-free backpropagation, and sampled under per-scale
//! iteration schedules with an iteration-indexed key/value cache.

pub mod backbone;
pub mod budget;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod equilibrium;
pub mod error;
pub mod harness;
pub mod image;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
