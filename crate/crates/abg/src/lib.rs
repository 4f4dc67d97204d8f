//! Adversarial bipartite graph learning for cross-domain sequence
//! classification: frame- and video-level bipartite message passing
//! between source and target batches, interchangeable frame aggregators,
//! a conditional adversarial head, and the per-group training schedule.

pub mod adversarial;
pub mod agg;
pub mod config;
pub mod data;
pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod mat;
pub mod model;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod tape;
pub mod trainer;

pub use error::{AbgError, Result};
