//! Cascaded cross-attention networks for multiple-instance classification of
//! whole-slide images.

pub mod attention;
pub mod autograd;
pub mod bag;
pub mod baseline;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod posenc;
pub mod preprocess;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
