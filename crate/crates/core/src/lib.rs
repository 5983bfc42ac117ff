//! Drowsiness classification from photoplethysmography (PPG).
//!
//! The pipeline: causal pre-filtering, a 22-channel Butterworth hyper-filter
//! bank, windowed z-normalised patterns, optional Q-learning sub-band
//! selection, and a dilated causal temporal convolutional classifier.

pub mod bandselect;
pub mod error;
pub mod filters;
pub mod hyperbank;
pub mod json;
pub mod patterns;
pub mod pipeline;
pub mod signal;
pub mod tcn;

pub use error::{Error, Result};
pub use signal::{ClassLabel, PpgSignal, SynthConfig};
