pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gates;
pub mod layers;
pub mod model;
pub mod numeric;
pub mod report;
pub mod sharing;
pub mod train;

pub use error::{Error, Result};
