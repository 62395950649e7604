pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod net;
pub mod organism;
pub mod particle;
pub mod run;
pub mod train;

pub use error::{Error, Result};
