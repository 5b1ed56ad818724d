//! Temporal interest modeling over user interaction sequences, attention
//! based multimodal fusion and a VAE generation head, trained with a joint
//! reconstruction / score / class objective.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod encoding;
pub mod error;
pub mod fusion;
pub mod generation;
pub mod labels;
pub mod model;
pub mod numerics;
pub mod providers;
pub mod synthetic;
pub mod temporal;
pub mod training;

pub use error::{Error, Result};
