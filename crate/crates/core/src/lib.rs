pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod param;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
