//! Hyperparameter-free training losses for monocular 3D morphable model
//! reconstruction, the multiterm baselines they replace, and the machinery to
//! benchmark them on synthetic data.

pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod hparam_search;
pub mod losses;
pub mod morphable;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
