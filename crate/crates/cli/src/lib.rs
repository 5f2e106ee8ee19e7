//! File formats, checkpoints and the `satskip` command line on top of
//! `satskip-core`.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod pgm;
pub mod report;
pub mod tensorfile;

pub use error::{Error, Result};
