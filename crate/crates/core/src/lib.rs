//! Adaptive hierarchical spatio-temporal network for traffic forecasting.
//!
//! The crate is generic over the floating-point type through [`Scalar`];
//! the `*64` aliases below fix it to `f64`, which is what training,
//! checkpoints and the command-line tool use.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod graph;
pub mod hierarchy;
pub mod model;
pub mod params;
pub mod scalar;
pub mod stblock;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = diffcore::Tensor<f64>;
pub type Tape64 = diffcore::Tape<f64>;
pub type GraphSpec64 = graph::GraphSpec<f64>;
pub type Model64 = model::Model<f64>;
pub type AssignmentState64 = hierarchy::AssignmentState<f64>;
