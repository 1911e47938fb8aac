//! Latent scene-graph representations for multi-criteria image classification.
pub mod cli;
pub mod decoders;
pub mod error;
pub mod geometry;
pub mod nn;
pub mod latentgraph;
pub mod metrics;
pub mod perception;
pub mod scenegen;
pub mod seed;
pub mod training;
pub use error::{Error, Result};
