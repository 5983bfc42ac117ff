use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{linear_grid, FilterKind, LinearFilter};
use crate::error::{Error, Result};
use crate::signal::DEFAULT_FS;

/// Attenuation spec for a linear-phase pre-filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirSpec {
    pub kind: FilterKind,
    pub f_pass_hz: f64,
    pub f_stop_hz: f64,
    /// Maximum passband deviation from 0 dB.
    pub a_pass_db: f64,
    /// Minimum stopband attenuation.
    pub a_stop_db: f64,
    pub fs: f64,
}

impl FirSpec {
    /// Low-pass pre-filter: pass 4.8 Hz, stop 10 Hz, 0.001 dB ripple, 100 dB attenuation.
    pub fn ppg_lowpass() -> Self {
        Self {
            kind: FilterKind::LowPass,
            f_pass_hz: 4.8,
            f_stop_hz: 10.0,
            a_pass_db: 0.001,
            a_stop_db: 100.0,
            fs: DEFAULT_FS,
        }
    }

    /// High-pass pre-filter: pass 1 Hz, stop 0.3 Hz, 0.01 dB ripple, 40 dB attenuation.
    pub fn ppg_highpass() -> Self {
        Self {
            kind: FilterKind::HighPass,
            f_pass_hz: 1.0,
            f_stop_hz: 0.3,
            a_pass_db: 0.01,
            a_stop_db: 40.0,
            fs: DEFAULT_FS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(Error::config("fs", "must be positive"));
        }
        if !(self.a_pass_db > 0.0) {
            return Err(Error::config("a_pass_db", "must be > 0"));
        }
        if !(self.a_stop_db > 0.0) {
            return Err(Error::config("a_stop_db", "must be > 0"));
        }
        let nyquist = self.fs / 2.0;
        for (field, f) in [("f_pass_hz", self.f_pass_hz), ("f_stop_hz", self.f_stop_hz)] {
            if !(f > 0.0 && f < nyquist) {
                return Err(Error::config(field, format!("must lie in (0, {nyquist})")));
            }
        }
        let width = self.transition_hz();
        if !(width > 0.0) {
            return Err(Error::Design(format!(
                "{:?} needs a positive transition band, got {width} Hz",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn transition_hz(&self) -> f64 {
        match self.kind {
            FilterKind::LowPass => self.f_stop_hz - self.f_pass_hz,
            FilterKind::HighPass => self.f_pass_hz - self.f_stop_hz,
        }
    }

    /// Allowed passband deviation as a linear amplitude error.
    pub fn passband_delta(&self) -> f64 {
        1.0 - 10f64.powf(-self.a_pass_db / 20.0)
    }

    pub fn stopband_delta(&self) -> f64 {
        10f64.powf(-self.a_stop_db / 20.0)
    }

    fn in_passband(&self, f: f64) -> bool {
        match self.kind {
            FilterKind::LowPass => f <= self.f_pass_hz,
            FilterKind::HighPass => f >= self.f_pass_hz,
        }
    }

    fn in_stopband(&self, f: f64) -> bool {
        match self.kind {
            FilterKind::LowPass => f >= self.f_stop_hz,
            FilterKind::HighPass => f <= self.f_stop_hz,
        }
    }
}

/// Type-I linear-phase FIR filter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FirFilter {
    taps: Vec<f64>,
    spec: FirSpec,
    beta: f64,
    #[serde(skip)]
    history: Vec<f64>,
}

/// Kaiser window shape parameter for `atten_db` of ripple attenuation.
pub fn kaiser_beta(atten_db: f64) -> f64 {
    if atten_db > 50.0 {
        0.1102 * (atten_db - 8.7)
    } else if atten_db >= 21.0 {
        0.5842 * (atten_db - 21.0).powf(0.4) + 0.07886 * (atten_db - 21.0)
    } else {
        0.0
    }
}

/// Odd tap count estimate for `atten_db` over a transition of
/// `transition_rad` radians/sample.
pub fn kaiser_order(atten_db: f64, transition_rad: f64) -> usize {
    let n = ((atten_db - 7.95) / (2.285 * transition_rad)).ceil().max(1.0) as usize + 1;
    n | 1
}

fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    loop {
        term *= (half / k) * (half / k);
        sum += term;
        if term < sum * 1e-17 {
            return sum;
        }
        k += 1.0;
    }
}

fn kaiser_window(n: usize, beta: f64) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let denom = bessel_i0(beta);
    let m = (n - 1) as f64;
    let mut w: Vec<f64> = (0..n)
        .map(|i| {
            let r = 2.0 * i as f64 / m - 1.0;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom
        })
        .collect();
    mirror(&mut w);
    w
}

/// Copies the first half onto the second so the sequence is exactly symmetric.
fn mirror(v: &mut [f64]) {
    let n = v.len();
    for i in 0..n / 2 {
        v[n - 1 - i] = v[i];
    }
}

fn windowed_taps(spec: &FirSpec, n: usize, beta: f64) -> Vec<f64> {
    let cutoff = 0.5 * (spec.f_pass_hz + spec.f_stop_hz) / spec.fs;
    let mid = (n - 1) / 2;
    let window = kaiser_window(n, beta);
    let mut taps = window
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let x = i as f64 - mid as f64;
            let lowpass = if i == mid {
                2.0 * cutoff
            } else {
                (2.0 * PI * cutoff * x).sin() / (PI * x)
            };
            let ideal = match spec.kind {
                FilterKind::LowPass => lowpass,
                FilterKind::HighPass if i == mid => 1.0 - lowpass,
                FilterKind::HighPass => -lowpass,
            };
            ideal * w
        })
        .collect::<Vec<_>>();
    mirror(&mut taps);
    taps
}

/// Designs a Kaiser-window FIR that meets `spec` on a 4096-point grid plus
/// the band edges. Starts from the textbook order estimate and grows the
/// tap count until the measured response complies.
pub fn design_fir(spec: &FirSpec) -> Result<FirFilter> {
    spec.validate()?;
    let delta = spec.passband_delta().min(spec.stopband_delta());
    let atten = -20.0 * delta.log10();
    let beta = kaiser_beta(atten);
    let transition_rad = 2.0 * PI * spec.transition_hz() / spec.fs;
    let start = kaiser_order(atten, transition_rad);
    let limit = start * 2 + 64;
    let mut n = start;
    while n <= limit {
        let filter = FirFilter::from_taps(windowed_taps(spec, n, beta), *spec, beta);
        if filter.meets_spec() {
            return Ok(filter);
        }
        n += 2;
    }
    Err(Error::Design(format!(
        "no Kaiser design up to {limit} taps meets the {:?} spec",
        spec.kind
    )))
}

impl FirFilter {
    fn from_taps(taps: Vec<f64>, spec: FirSpec, beta: f64) -> Self {
        let history = vec![0.0; taps.len().saturating_sub(1)];
        Self {
            taps,
            spec,
            beta,
            history,
        }
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn spec(&self) -> &FirSpec {
        &self.spec
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Group delay in samples, `(N - 1) / 2`.
    pub fn group_delay(&self) -> f64 {
        (self.taps.len() - 1) as f64 / 2.0
    }

    /// Frequencies the spec is verified on: the 4096-point grid plus both edges.
    pub fn verification_grid(&self) -> Vec<f64> {
        let mut grid = linear_grid(self.spec.fs, 4096);
        grid.push(self.spec.f_pass_hz);
        grid.push(self.spec.f_stop_hz);
        grid
    }

    /// Worst passband deviation (dB) and weakest stopband attenuation (dB)
    /// measured over [`Self::verification_grid`].
    pub fn measured_performance(&self) -> (f64, f64) {
        let mut ripple: f64 = 0.0;
        let mut atten = f64::INFINITY;
        for f in self.verification_grid() {
            let db = super::magnitude_db(self.response_at(f));
            if self.spec.in_passband(f) {
                ripple = ripple.max(db.abs());
            }
            if self.spec.in_stopband(f) {
                atten = atten.min(-db);
            }
        }
        (ripple, atten)
    }

    pub fn meets_spec(&self) -> bool {
        let (ripple, atten) = self.measured_performance();
        ripple <= self.spec.a_pass_db && atten >= self.spec.a_stop_db
    }

    pub fn to_json(&self) -> Result<String> {
        crate::json::to_string_f64_exact(self)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut f: FirFilter = serde_json::from_str(s)?;
        if f.taps.is_empty() || f.taps.len() % 2 == 0 || f.taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::Data("FIR taps must be a finite odd-length sequence".into()));
        }
        f.history = vec![0.0; f.taps.len() - 1];
        Ok(f)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for lane in 0..4 {
            acc[lane] += a[4 * i + lane] * b[4 * i + lane];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl LinearFilter for FirFilter {
    fn fs(&self) -> f64 {
        self.spec.fs
    }

    fn response_at(&self, f_hz: f64) -> Complex64 {
        let w = 2.0 * PI * f_hz / self.spec.fs;
        self.taps
            .iter()
            .enumerate()
            .fold(Complex64::new(0.0, 0.0), |acc, (n, &h)| {
                let phase = w * n as f64;
                acc + Complex64::new(h * phase.cos(), -h * phase.sin())
            })
    }

    fn reset(&mut self) {
        self.history.clear();
        self.history.resize(self.taps.len().saturating_sub(1), 0.0);
    }

    fn process(&mut self, input: &[f64], output: &mut [f64]) {
        assert_eq!(input.len(), output.len(), "input/output length mismatch");
        let n = self.taps.len();
        let reversed: Vec<f64> = self.taps.iter().rev().copied().collect();
        let mut ext = Vec::with_capacity(self.history.len() + input.len());
        ext.extend_from_slice(&self.history);
        ext.extend_from_slice(input);
        for (i, y) in output.iter_mut().enumerate() {
            *y = dot(&reversed, &ext[i..i + n]);
        }
        let keep = n - 1;
        self.history.clear();
        self.history.extend_from_slice(&ext[ext.len() - keep..]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::{apply_causal, frequency_response, magnitude_db};
    use crate::signal::PpgSignal;

    #[test]
    fn lowpass_meets_attenuation_table() {
        let f = design_fir(&FirSpec::ppg_lowpass()).unwrap();
        assert_eq!(f.len() % 2, 1);
        let (ripple, atten) = f.measured_performance();
        assert!(ripple <= 0.001, "ripple {ripple}");
        assert!(atten >= 100.0, "atten {atten}");
        let h10 = magnitude_db(f.response_at(10.0));
        assert!(h10 <= -100.0, "{h10}");
    }

    #[test]
    fn highpass_meets_attenuation_table() {
        let f = design_fir(&FirSpec::ppg_highpass()).unwrap();
        let (ripple, atten) = f.measured_performance();
        assert!(ripple <= 0.01, "ripple {ripple}");
        assert!(atten >= 40.0, "atten {atten}");
        assert!(magnitude_db(f.response_at(0.3)) <= -40.0);
    }

    #[test]
    fn taps_are_symmetric() {
        let f = design_fir(&FirSpec::ppg_lowpass()).unwrap();
        let t = f.taps();
        for i in 0..t.len() / 2 {
            assert_eq!(t[i], t[t.len() - 1 - i]);
        }
        assert_eq!(f.group_delay(), ((t.len() - 1) / 2) as f64);
    }

    #[test]
    fn dc_response_is_tap_sum_and_unity_gain() {
        let f = design_fir(&FirSpec::ppg_lowpass()).unwrap();
        let sum: f64 = f.taps().iter().sum();
        let h0 = frequency_response(&f, &[0.0]).unwrap()[0];
        assert!((h0.re - sum).abs() < 1e-12 && h0.im.abs() < 1e-12);
        let delta = FirSpec::ppg_lowpass().passband_delta();
        assert!((sum - 1.0).abs() <= delta);
    }

    #[test]
    fn constant_passes_lowpass() {
        let mut f = design_fir(&FirSpec::ppg_lowpass()).unwrap();
        let sig = PpgSignal::new(vec![2.0; 3000], 1000.0).unwrap();
        let y = apply_causal(&mut f, &sig).unwrap();
        for &v in &y.samples()[f.len()..] {
            assert!(magnitude_db(Complex64::new(v / 2.0, 0.0)).abs() <= 0.001);
        }
    }

    #[test]
    fn impulse_returns_taps() {
        let mut f = design_fir(&FirSpec::ppg_lowpass()).unwrap();
        let n = f.len() + 10;
        let mut x = vec![0.0; n];
        x[0] = 1.0;
        let y = apply_causal(&mut f, &PpgSignal::new(x, 1000.0).unwrap()).unwrap();
        assert_eq!(&y.samples()[..f.len()], f.taps());
        assert!(y.samples()[f.len()..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn streaming_matches_whole_signal() {
        let mut f = design_fir(&FirSpec::ppg_lowpass()).unwrap();
        let x: Vec<f64> = (0..4000).map(|i| ((i * 37 % 101) as f64 - 50.0) / 50.0).collect();
        let whole = apply_causal(&mut f, &PpgSignal::new(x.clone(), 1000.0).unwrap()).unwrap();
        f.reset();
        let mut out = vec![0.0; x.len()];
        let (a, b) = x.split_at(1500);
        let (oa, ob) = out.split_at_mut(1500);
        f.process(a, oa);
        f.process(b, ob);
        for (u, v) in whole.samples().iter().zip(&out) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_transition_is_design_error() {
        let spec = FirSpec {
            f_stop_hz: 4.8,
            ..FirSpec::ppg_lowpass()
        };
        assert!(matches!(design_fir(&spec), Err(Error::Design(_))));
        let inverted = FirSpec {
            f_pass_hz: 0.2,
            ..FirSpec::ppg_highpass()
        };
        assert!(matches!(design_fir(&inverted), Err(Error::Design(_))));
    }

    #[test]
    fn json_keeps_coefficients_exact() {
        let f = design_fir(&FirSpec::ppg_lowpass()).unwrap();
        let text = f.to_json().unwrap();
        let back = FirFilter::from_json(&text).unwrap();
        assert_eq!(back.taps(), f.taps());
        assert_eq!(back.spec(), f.spec());
    }

    #[test]
    fn bessel_matches_reference_values() {
        // I0(1) and I0(5) from tables
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-14);
        assert!((bessel_i0(5.0) - 27.239_871_823_604_442).abs() < 1e-11);
    }
}
