//! Pedestrian trajectory forecasting engine.
//!
//! The pipeline has two cooperating models. A global grid model learns
//! crowd occupancy over a road network inferred from historical
//! trajectories and emits a fixed-length trip embedding. A socially-aware
//! local model consumes per-pedestrian displacement histories (optionally
//! fused with the frozen trip embedding) and outputs bivariate-Gaussian
//! displacement forecasts, trained end to end on a composite objective.
//!
//! Modules follow the data flow: [`dataset`] parses scenes and cuts
//! windows, [`roadnet`] builds the grid graph, [`global`] and [`local`]
//! hold the two models on top of the [`tape`] autodiff engine, [`train`]
//! runs the two-phase protocol, and [`eval`] scores forecasts.

pub mod dataset;
pub mod error;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod roadnet;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
