//! File formats, audio IO, run configuration and the command line for
//! end-to-end neural diarization. The computation lives in `eend_core`.

pub mod audio;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod params;
pub mod report;

pub use error::{Error, Result};
