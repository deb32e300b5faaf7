//! Unsupervised window embeddings for multichannel physiological time
//! series: a dilated causal convolutional encoder trained with a triplet
//! objective, clustering of the embeddings, optional time embeddings, and
//! feature-based classifiers that explain the clusters.

#![allow(clippy::needless_range_loop)]

pub mod clustering;
pub mod encoder;
pub mod error;
pub mod explain;
pub mod matrix;
pub mod pipeline;
pub mod sampling;
pub mod signal;
pub mod time_embedding;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;
