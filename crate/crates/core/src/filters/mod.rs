//! Digital filter design and causal application.
//!
//! Two families live here: Kaiser-window FIR pre-filters sized from an
//! attenuation spec, and Butterworth IIR filters realised as cascaded
//! second-order sections for the hyper-filtering layers.

mod fir;
mod iir;

pub use fir::{design_fir, kaiser_beta, kaiser_order, FirFilter, FirSpec};
pub use iir::{butterworth_magnitude, design_butterworth, Biquad, ButterworthDesign, SosCascade};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::PpgSignal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterKind {
    LowPass,
    HighPass,
}

/// A linear time-invariant filter with internal delay state.
pub trait LinearFilter {
    fn fs(&self) -> f64;

    /// Transfer function evaluated at `e^{j 2 pi f / fs}`. No range check.
    fn response_at(&self, f_hz: f64) -> Complex64;

    /// Zeroes the delay state.
    fn reset(&mut self);

    /// Filters a block, continuing from the current state.
    fn process(&mut self, input: &[f64], output: &mut [f64]);
}

/// Resets `filter` and runs it causally over the whole signal.
pub fn apply_causal<F: LinearFilter + ?Sized>(filter: &mut F, sig: &PpgSignal) -> Result<PpgSignal> {
    if (filter.fs() - sig.fs()).abs() > 1e-9 * sig.fs() {
        return Err(Error::Usage(format!(
            "filter designed for fs={} applied to signal at fs={}",
            filter.fs(),
            sig.fs()
        )));
    }
    filter.reset();
    let mut out = vec![0.0; sig.len()];
    filter.process(sig.samples(), &mut out);
    Ok(sig.with_samples(out))
}

/// Complex response at each frequency in `freqs_hz`, which must lie in `[0, fs/2]`.
pub fn frequency_response<F: LinearFilter + ?Sized>(filter: &F, freqs_hz: &[f64]) -> Result<Vec<Complex64>> {
    let nyquist = filter.fs() / 2.0;
    if let Some(f) = freqs_hz.iter().find(|f| !(**f >= 0.0 && **f <= nyquist)) {
        return Err(Error::Usage(format!("frequency {f} Hz outside [0, {nyquist}]")));
    }
    Ok(freqs_hz.iter().map(|&f| filter.response_at(f)).collect())
}

/// `n` evenly spaced frequencies covering `[0, fs/2]` inclusive.
pub fn linear_grid(fs: f64, n: usize) -> Vec<f64> {
    let nyquist = fs / 2.0;
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| nyquist * i as f64 / (n - 1) as f64).collect(),
    }
}

pub fn magnitude_db(h: Complex64) -> f64 {
    20.0 * h.norm().log10()
}
