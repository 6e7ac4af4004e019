pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod imageio;
pub mod report;
pub mod service;
pub mod ingest;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
