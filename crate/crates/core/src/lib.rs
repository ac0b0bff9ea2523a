//! Coordinate regression with the differentiable spatial-to-numerical transform.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod docs;
pub mod dsnt;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod heatmap;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
