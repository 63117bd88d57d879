//! Core of a single-stage multi-person parser built around representative parts.
//!
//! Everything here is `no_std` + `alloc`: the tensor engine and its
//! reverse-mode tape, the backbone / detection / parsing heads, losses and
//! SGD, the synthetic scene generator, and the evaluation metrics. File
//! formats, timing and the command line live in the `repparse` crate.

#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod detect;
pub mod error;
#[cfg(any(test, feature = "testing"))]
pub mod fixtures;
#[cfg(any(test, feature = "testing"))]
pub mod gradcheck;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod params;
#[cfg(any(test, feature = "testing"))]
pub mod reference;
pub mod repparse;
pub mod synth;
pub mod train;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use config::{DecodeConfig, ModelConfig};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::Tensor;
