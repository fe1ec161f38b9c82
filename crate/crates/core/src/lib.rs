//! Emotion latent space construction and text-driven image sentiment transfer.

pub mod archive;
pub mod cli;
pub mod classifier;
pub mod dataset;
pub mod embedding;
pub mod emolat_space;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod pixels;
pub mod semantic_graph;
pub mod transfer_net;

pub use error::{Error, Result};
