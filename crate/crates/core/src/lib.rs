//! End-to-end neural diarization, without the standard library.
//!
//! Everything here is pure computation over in-memory buffers: the
//! differentiable tensor engine, feature extraction, mixture simulation, the
//! self-attention and BLSTM networks, training objectives, the optimizer
//! loop, decision post-processing and DER scoring. File formats, audio IO and
//! the command line live in the `eend` crate.

#![no_std]

extern crate alloc;

pub mod dsp;
pub mod error;
pub mod features;
pub mod infer;
pub mod labels;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod score;
pub mod simulate;
pub mod train;

pub use error::{Error, Result};
pub use labels::LabelSequence;
pub use numerics::{Graph, Tensor, Var};

/// Version string recorded next to every run's outputs.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
