pub mod agent;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod env;
pub mod error;
pub mod exec;
pub mod explain;
pub mod head;
pub mod net;
pub mod plot;
pub mod records;
pub mod replay;
pub mod training;

pub use error::{CheckpointError, Error, Result};
