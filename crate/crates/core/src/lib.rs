//! Contrastive sensor fusion.
//!
//! Self-supervised training of one shared-weight encoder whose
//! representation of a scene stays stable under any subset of the input
//! sensor channels, together with the evaluation protocol used to measure
//! it: PCA, nearest-neighbour clustering quality, leave-one-out k-NN
//! accuracy, channel-subset sweeps and maximal-activation retrieval.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod loss;
pub mod scenes;
pub mod training;
pub mod views;

pub use error::{CsfError, Result};
