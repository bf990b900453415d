pub mod analysis;
pub mod autodiff;
pub mod blocks;
pub mod codebook;
pub mod data;
pub mod error;
pub mod experiment;
pub mod network;
pub mod nn;

pub use error::{Error, Result};
