pub mod analysis;
pub mod attention;
pub mod cli;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod experiment;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
