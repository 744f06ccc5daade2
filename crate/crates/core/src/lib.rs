pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod flow;
pub mod image;
pub mod metrics;
pub mod model;
pub mod patch;
pub mod rope;
pub mod tensor;

pub use error::{Error, Result};
