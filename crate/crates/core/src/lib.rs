pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
