pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod nn;
pub mod predictor;
pub mod pretrain;
pub mod search;

pub use error::{Error, Result};
