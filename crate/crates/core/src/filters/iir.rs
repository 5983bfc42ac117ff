use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{FilterKind, LinearFilter};
use crate::error::{Error, Result};

/// Second-order section with `a0` normalised to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    /// Poles strictly inside the unit circle (stability triangle).
    pub fn is_stable(&self) -> bool {
        self.a2.abs() < 1.0 && self.a1.abs() < 1.0 + self.a2
    }

    /// `H(e^{jw})`. The polynomials are expanded around `z = 1` (or `z = -1`
    /// above `pi/2`) so the double zeros of low/high-pass sections do not
    /// cancel catastrophically near DC or Nyquist.
    pub fn response_at(&self, w: f64) -> Complex64 {
        let half = 0.5 * w;
        let (origin, u) = if w.abs() <= std::f64::consts::FRAC_PI_2 {
            // e^{-jw} - 1
            (1.0, Complex64::new(-2.0 * half.sin().powi(2), -w.sin()))
        } else {
            // e^{-jw} + 1
            (-1.0, Complex64::new(2.0 * half.cos().powi(2), -w.sin()))
        };
        let expand = |c0: f64, c1: f64, c2: f64| {
            let k0 = c0 + origin * c1 + c2;
            let k1 = c1 + 2.0 * origin * c2;
            k0 + u * (k1 + u * c2)
        };
        expand(self.b0, self.b1, self.b2) / expand(1.0, self.a1, self.a2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ButterworthDesign {
    pub kind: FilterKind,
    pub cutoff_hz: f64,
    pub order: usize,
    pub fs: f64,
}

/// Cascade of biquads plus per-section transposed direct-form II state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SosCascade {
    sections: Vec<Biquad>,
    design: ButterworthDesign,
    #[serde(skip)]
    state: Vec<[f64; 2]>,
}

/// Butterworth design by bilinear transform with pre-warping, so the -3 dB
/// point lands exactly on `cutoff_hz`.
pub fn design_butterworth(kind: FilterKind, cutoff_hz: f64, order: usize, fs: f64) -> Result<SosCascade> {
    if !(fs > 0.0 && fs.is_finite()) {
        return Err(Error::Design(format!("sampling rate must be positive, got {fs}")));
    }
    if !(cutoff_hz > 0.0 && cutoff_hz < fs / 2.0) {
        return Err(Error::Design(format!(
            "cutoff {cutoff_hz} Hz outside (0, {})",
            fs / 2.0
        )));
    }
    if order == 0 {
        return Err(Error::Design("order must be >= 1".into()));
    }
    let two_fs = 2.0 * fs;
    let warped = two_fs * (PI * cutoff_hz / fs).tan();
    let n = order as f64;
    let to_digital = |prototype: Complex64| -> Complex64 {
        let s = match kind {
            FilterKind::LowPass => prototype * warped,
            FilterKind::HighPass => warped / prototype,
        };
        (two_fs + s) / (two_fs - s)
    };

    let mut sections = Vec::with_capacity(order.div_ceil(2));
    for k in 0..order / 2 {
        let theta = PI * (2 * k + order + 1) as f64 / (2.0 * n);
        let pole = to_digital(Complex64::from_polar(1.0, theta));
        let a1 = -2.0 * pole.re;
        let a2 = pole.norm_sqr();
        sections.push(match kind {
            FilterKind::LowPass => {
                let g = (1.0 + a1 + a2) / 4.0;
                Biquad { b0: g, b1: 2.0 * g, b2: g, a1, a2 }
            }
            FilterKind::HighPass => {
                let g = (1.0 - a1 + a2) / 4.0;
                Biquad { b0: g, b1: -2.0 * g, b2: g, a1, a2 }
            }
        });
    }
    if order % 2 == 1 {
        let pole = to_digital(Complex64::new(-1.0, 0.0));
        let a1 = -pole.re;
        sections.push(match kind {
            FilterKind::LowPass => {
                let g = (1.0 + a1) / 2.0;
                Biquad { b0: g, b1: g, b2: 0.0, a1, a2: 0.0 }
            }
            FilterKind::HighPass => {
                let g = (1.0 - a1) / 2.0;
                Biquad { b0: g, b1: -g, b2: 0.0, a1, a2: 0.0 }
            }
        });
    }
    if let Some(bad) = sections.iter().find(|s| !s.is_stable()) {
        return Err(Error::Design(format!("unstable section {bad:?}")));
    }
    let state = vec![[0.0; 2]; sections.len()];
    Ok(SosCascade {
        sections,
        design: ButterworthDesign {
            kind,
            cutoff_hz,
            order,
            fs,
        },
        state,
    })
}

/// Closed-form Butterworth magnitude `1/sqrt(1 + r^(2n))` with `r = f/fc`
/// (high-pass: `r = fc/f`). With `warped`, `r` uses the bilinear frequency
/// map `tan(pi f/fs)` and equals the digital design's magnitude exactly.
pub fn butterworth_magnitude(design: &ButterworthDesign, f_hz: f64, warped: bool) -> f64 {
    let ratio = if warped {
        (PI * f_hz / design.fs).tan() / (PI * design.cutoff_hz / design.fs).tan()
    } else {
        f_hz / design.cutoff_hz
    };
    let two_n = 2 * design.order as i32;
    match design.kind {
        FilterKind::LowPass => 1.0 / (1.0 + ratio.powi(two_n)).sqrt(),
        FilterKind::HighPass => {
            if ratio == 0.0 {
                0.0
            } else {
                1.0 / (1.0 + ratio.powi(-two_n)).sqrt()
            }
        }
    }
}

impl SosCascade {
    pub fn sections(&self) -> &[Biquad] {
        &self.sections
    }

    pub fn design(&self) -> &ButterworthDesign {
        &self.design
    }

    pub fn is_stable(&self) -> bool {
        self.sections.iter().all(Biquad::is_stable)
    }

    pub fn state(&self) -> &[[f64; 2]] {
        &self.state
    }

    pub fn to_json(&self) -> Result<String> {
        crate::json::to_string_f64_exact(self)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut c: SosCascade = serde_json::from_str(s)?;
        if !c.is_stable() {
            return Err(Error::Data("cascade contains an unstable section".into()));
        }
        c.state = vec![[0.0; 2]; c.sections.len()];
        Ok(c)
    }
}

impl LinearFilter for SosCascade {
    fn fs(&self) -> f64 {
        self.design.fs
    }

    fn response_at(&self, f_hz: f64) -> Complex64 {
        let w = 2.0 * PI * f_hz / self.design.fs;
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response_at(w))
    }

    fn reset(&mut self) {
        self.state.iter_mut().for_each(|s| *s = [0.0; 2]);
    }

    fn process(&mut self, input: &[f64], output: &mut [f64]) {
        assert_eq!(input.len(), output.len(), "input/output length mismatch");
        if self.state.len() != self.sections.len() {
            self.state = vec![[0.0; 2]; self.sections.len()];
        }
        output.copy_from_slice(input);
        for (s, st) in self.sections.iter().zip(self.state.iter_mut()) {
            let [mut z1, mut z2] = *st;
            for v in output.iter_mut() {
                let x = *v;
                let y = s.b0 * x + z1;
                z1 = s.b1 * x - s.a1 * y + z2;
                z2 = s.b2 * x - s.a2 * y;
                *v = y;
            }
            *st = [z1, z2];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::{apply_causal, frequency_response, magnitude_db};
    use crate::signal::PpgSignal;

    #[test]
    fn cutoff_is_half_power() {
        let f = design_butterworth(FilterKind::LowPass, 5.0, 4, 1000.0).unwrap();
        let h = f.response_at(5.0).norm();
        assert!((h - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!((magnitude_db(f.response_at(5.0)) + 3.0103).abs() < 0.05);
        for order in 1..=8 {
            for kind in [FilterKind::LowPass, FilterKind::HighPass] {
                let f = design_butterworth(kind, 2.5, order, 1000.0).unwrap();
                assert!((f.response_at(2.5).norm() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
                assert_eq!(f.sections().len(), order.div_ceil(2));
                assert!(f.is_stable());
            }
        }
    }

    #[test]
    fn octave_above_cutoff_matches_closed_form() {
        let f = design_butterworth(FilterKind::LowPass, 5.0, 4, 1000.0).unwrap();
        let measured = magnitude_db(f.response_at(10.0));
        // 10 log10(1 + 2^8) = 24.0824
        let expected = -10.0 * (1.0 + 2f64.powi(8)).log10();
        assert!((measured - expected).abs() < 0.5, "{measured} vs {expected}");
        assert!((measured + 24.1).abs() < 0.5);
    }

    #[test]
    fn highpass_blocks_dc() {
        let f = design_butterworth(FilterKind::HighPass, 0.5, 4, 1000.0).unwrap();
        assert!(f.response_at(0.0).norm() <= 1e-10);
    }

    #[test]
    fn cascade_is_product_of_sections() {
        let f = design_butterworth(FilterKind::HighPass, 60.0, 5, 1000.0).unwrap();
        for &hz in &[20.0, 45.0, 60.0, 130.0, 250.0, 400.0] {
            let w = 2.0 * PI * hz / 1000.0;
            let mut product = Complex64::new(1.0, 0.0);
            for s in f.sections() {
                let z = Complex64::from_polar(1.0, w);
                let num = s.b0 * z * z + s.b1 * z + s.b2;
                let den = z * z + s.a1 * z + s.a2;
                product *= num / den;
            }
            let h = frequency_response(&f, &[hz]).unwrap()[0];
            assert!((h - product).norm() <= 1e-12 * product.norm(), "{hz}");
        }
    }

    #[test]
    fn warped_closed_form_is_exact() {
        let f = design_butterworth(FilterKind::LowPass, 1.4, 4, 1000.0).unwrap();
        for &hz in &[0.2, 1.4, 3.0, 9.0, 60.0] {
            let exact = butterworth_magnitude(f.design(), hz, true);
            assert!((f.response_at(hz).norm() - exact).abs() <= 1e-9 * exact.max(1e-12));
        }
    }

    #[test]
    fn out_of_range_cutoff_is_design_error() {
        assert!(design_butterworth(FilterKind::LowPass, 0.0, 4, 1000.0).is_err());
        assert!(design_butterworth(FilterKind::LowPass, 500.0, 4, 1000.0).is_err());
        assert!(design_butterworth(FilterKind::LowPass, 5.0, 0, 1000.0).is_err());
    }

    #[test]
    fn reset_clears_state() {
        let mut f = design_butterworth(FilterKind::LowPass, 5.0, 4, 1000.0).unwrap();
        let sig = PpgSignal::new(vec![1.0; 100], 1000.0).unwrap();
        let a = apply_causal(&mut f, &sig).unwrap();
        assert!(f.state().iter().any(|s| s[0] != 0.0));
        let b = apply_causal(&mut f, &sig).unwrap();
        assert_eq!(a.samples(), b.samples());
        f.reset();
        assert!(f.state().iter().all(|s| *s == [0.0, 0.0]));
    }

    #[test]
    fn json_round_trip() {
        let f = design_butterworth(FilterKind::HighPass, 0.5, 4, 1000.0).unwrap();
        let text = f.to_json().unwrap();
        assert!(text.contains("HighPass"));
        let back = SosCascade::from_json(&text).unwrap();
        assert_eq!(back.sections(), f.sections());
        assert_eq!(back.design(), f.design());
    }
}
