//! Behavioral pseudo-label clustering of agent trajectories coupled to a
//! goal-guided sparse graph trajectory predictor.

pub mod autodiff;
pub mod checkpoint;
pub mod clustering;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod graphs;
pub mod params;
pub mod pipeline;
pub mod predictor;
pub mod pseudolabel;
pub mod softdtw;
pub mod vrnn;

pub use error::{Error, Result};
