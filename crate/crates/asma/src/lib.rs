//! File formats, experiment harness and PNG rendering on top of
//! [`asma_core`].

pub mod error;
pub mod files;
pub mod harness;
pub mod render;
pub mod report;

pub use error::{Error, Result};
