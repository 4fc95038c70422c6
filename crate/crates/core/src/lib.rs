pub mod backbone;
pub mod datapipe;
pub mod engine;
pub mod error;
pub mod gcam;
pub mod losses;
pub mod nn;
pub mod scoring;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
