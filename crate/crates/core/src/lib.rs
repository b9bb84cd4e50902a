//! Offensive-image detection and dataset auditing over the joint embedding
//! space of a frozen vision-language encoder.

pub mod audit;
pub mod embedding;
pub mod eval;
pub mod encoder;
mod error;
pub mod prompt;
pub mod smid;

pub use error::{Error, Result};
