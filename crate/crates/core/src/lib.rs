//! Neural-network clustering trained directly from pairwise similar/dissimilar
//! constraints.
//!
//! A softmax network is trained with a contrastive KL-divergence cost so that
//! similar pairs produce matching cluster distributions and dissimilar pairs
//! diverge by at least a margin. Cluster assignments come from the argmax of
//! the output layer; no centroids or distance metric are involved.

pub mod baseline;
pub mod constraints;
pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod numeric;
pub mod pairloss;
pub mod runner;

pub use error::{Error, Result};
