//! Discrete-attribute editing in the latent space of a style-based generator.

pub mod attributes;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod generator;
pub mod image;
pub mod latent;
pub mod nn;
pub mod pipeline;
pub mod prior;
pub mod sprite;
pub mod tensor_file;
pub mod training;

pub use error::{Error, Result};
