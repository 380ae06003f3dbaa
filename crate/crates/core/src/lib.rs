//! Discriminative deep belief networks (stacked RBMs under a class-aware top RBM) trained
//! with generative, discriminative or semi-supervised objectives, and compressed to
//! heterogeneous per-neuron fixed-point bitwidths by a criticality-ranked prune/retrain loop.

pub mod approx;
pub mod data;
pub mod dbn;
pub mod drbm;
pub mod error;
pub mod fixed_point;
pub mod harness;
pub mod math;
pub mod oracle;
pub mod rbm;

pub use error::{Error, Result};
