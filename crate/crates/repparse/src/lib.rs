//! File formats, dataset IO, training driver, benchmark and command-line
//! front end for [`repparse_core`].

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod losslog;
pub mod netpbm;
pub mod pipeline;
pub mod sweep;
pub mod training;

pub use error::{Error, Result};
