pub mod config;
pub mod cost;
pub mod data;
pub mod detect;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod pyramid;
pub mod rfp;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
