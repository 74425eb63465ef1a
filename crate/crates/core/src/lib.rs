//! Differentiable lesion morphology features, a learned morphology prior and a
//! consistency-regularized segmentation/classification objective, with the
//! tooling to train and evaluate a small model on synthetic lesions.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod features;
pub mod grid;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod prior;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
