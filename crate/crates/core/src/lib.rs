//! Ocular response-time estimation from occipital EEG.
//!
//! The crate covers the whole batch pipeline: stimulus and synthetic EEG
//! generation, preprocessing, an RDWT-driven trajectory decoder with its own
//! reverse-mode autodiff engine, and DTW / cross-correlation latency metrics.

pub mod autodiff;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod rdwt;
pub mod signal;
pub mod synth;

pub use error::{Error, Result};
