pub mod bilinear;
pub mod cli;
pub mod cvec;
pub mod divisor;
pub mod error;
pub mod fd;
pub mod json;
pub mod kummer;
pub mod sampling;
pub mod search;
pub mod theta;

pub use error::{Error, Result};
