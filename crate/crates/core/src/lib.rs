pub mod baseline;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod ensemble;
pub mod evaluation;
pub mod error;
pub mod protocol;

pub use error::{Error, Result};
