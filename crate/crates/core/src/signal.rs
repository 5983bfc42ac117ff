//! PPG signal container, a two-lobe synthetic beat generator, and
//! derivative-based waveform segmentation.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FS: f64 = 1000.0;

/// Onset to systolic peak.
const SYSTOLIC_RISE_S: f64 = 0.15;
const SYSTOLIC_WIDTH_S: f64 = 0.06;
const DICROTIC_WIDTH_S: f64 = 0.08;
/// Lower bound on a single inter-beat interval (240 bpm).
const MIN_IBI_S: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    Drowsy,
    Wakeful,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 2] = [ClassLabel::Drowsy, ClassLabel::Wakeful];

    /// Class index used by the classifier head: Drowsy = 0, Wakeful = 1.
    pub fn index(self) -> usize {
        match self {
            ClassLabel::Drowsy => 0,
            ClassLabel::Wakeful => 1,
        }
    }

    pub fn from_index(idx: usize) -> Option<Self> {
        match idx {
            0 => Some(ClassLabel::Drowsy),
            1 => Some(ClassLabel::Wakeful),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Drowsy => "Drowsy",
            ClassLabel::Wakeful => "Wakeful",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "Drowsy" | "drowsy" => Ok(ClassLabel::Drowsy),
            "Wakeful" | "wakeful" => Ok(ClassLabel::Wakeful),
            other => Err(Error::Data(format!("unknown class label `{other}`"))),
        }
    }
}

/// Uniformly sampled photodetector trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpgSignal {
    samples: Vec<f64>,
    fs: f64,
    pub label: Option<ClassLabel>,
    pub subject_id: Option<String>,
}

impl PpgSignal {
    pub fn new(samples: Vec<f64>, fs: f64) -> Result<Self> {
        if !(fs.is_finite() && fs > 0.0) {
            return Err(Error::config("fs", format!("must be positive, got {fs}")));
        }
        if samples.is_empty() {
            return Err(Error::Precondition("signal has no samples".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            fs,
            label: None,
            subject_id: None,
        })
    }

    pub fn with_label(mut self, label: ClassLabel) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_subject(mut self, id: impl Into<String>) -> Self {
        self.subject_id = Some(id.into());
        self
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    /// Same metadata, new samples. Used by filters that preserve length and rate.
    pub(crate) fn with_samples(&self, samples: Vec<f64>) -> Self {
        Self {
            samples,
            fs: self.fs,
            label: self.label,
            subject_id: self.subject_id.clone(),
        }
    }

    /// Keeps the first `seconds` of the signal (or all of it when shorter).
    pub fn truncated(&self, seconds: f64) -> Self {
        let n = ((seconds * self.fs).round() as usize).clamp(1, self.samples.len());
        self.with_samples(self.samples[..n].to_vec())
    }

    /// Writes the text format: a `fs=<Hz>,label=<Drowsy|Wakeful|none>` header
    /// followed by one decimal sample per line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let label = self.label.map(ClassLabel::name).unwrap_or("none");
        writeln!(w, "fs={},label={}", self.fs, label)?;
        for v in &self.samples {
            writeln!(w, "{v}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("empty signal file".into()))??;
        let mut fs = None;
        let mut label = None;
        for field in header.trim().split(',') {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("malformed header field `{field}`")))?;
            match key.trim() {
                "fs" => {
                    fs = Some(value.trim().parse::<f64>().map_err(|_| {
                        Error::Data(format!("bad sampling rate `{value}`"))
                    })?)
                }
                "label" => {
                    label = match value.trim() {
                        "none" => None,
                        v => Some(v.parse::<ClassLabel>()?),
                    }
                }
                other => return Err(Error::Data(format!("unknown header key `{other}`"))),
            }
        }
        let fs = fs.ok_or_else(|| Error::Data("header is missing fs".into()))?;
        let mut samples = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            let v: f64 = t
                .parse()
                .map_err(|_| Error::Data(format!("line {}: bad sample `{t}`", lineno + 2)))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("line {}: non-finite sample", lineno + 2)));
            }
            samples.push(v);
        }
        let mut sig = PpgSignal::new(samples, fs)?;
        sig.label = label;
        Ok(sig)
    }
}

/// Parameters of the synthetic beat generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub heart_rate_mean_bpm: f64,
    /// Beat-to-beat heart-rate variability, in bpm.
    pub heart_rate_sd_bpm: f64,
    pub systolic_amp: f64,
    pub dicrotic_amp: f64,
    /// Delay of the dicrotic lobe after the systolic lobe.
    pub dicrotic_delay_s: f64,
    pub baseline_wander_amp: f64,
    pub baseline_wander_freq_hz: f64,
    pub noise_sd: f64,
    pub duration_s: f64,
    pub fs: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Class defaults: Wakeful 72 +/- 2 bpm, Drowsy 58 +/- 6 bpm.
    pub fn for_class(class: ClassLabel) -> Self {
        let (hr, sd) = match class {
            ClassLabel::Wakeful => (72.0, 2.0),
            ClassLabel::Drowsy => (58.0, 6.0),
        };
        let systolic_amp = 1.0;
        Self {
            heart_rate_mean_bpm: hr,
            heart_rate_sd_bpm: sd,
            systolic_amp,
            dicrotic_amp: 0.4 * systolic_amp,
            dicrotic_delay_s: 0.2,
            baseline_wander_amp: 0.1,
            baseline_wander_freq_hz: 0.25,
            noise_sd: 0.02 * systolic_amp,
            duration_s: 300.0,
            fs: DEFAULT_FS,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let hr = self.heart_rate_mean_bpm;
        if !(30.0..=200.0).contains(&hr) {
            return Err(Error::config("heart_rate_mean_bpm", format!("must lie in [30, 200], got {hr}")));
        }
        if !(self.heart_rate_sd_bpm >= 0.0 && self.heart_rate_sd_bpm.is_finite()) {
            return Err(Error::config("heart_rate_sd_bpm", "must be finite and >= 0"));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::config("duration_s", format!("must be > 0, got {}", self.duration_s)));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::config("noise_sd", format!("must be >= 0, got {}", self.noise_sd)));
        }
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(Error::config("fs", format!("must be > 0, got {}", self.fs)));
        }
        if !(self.dicrotic_delay_s >= 0.0 && self.dicrotic_delay_s.is_finite()) {
            return Err(Error::config("dicrotic_delay_s", "must be finite and >= 0"));
        }
        if !(self.baseline_wander_freq_hz >= 0.0 && self.baseline_wander_freq_hz.is_finite()) {
            return Err(Error::config("baseline_wander_freq_hz", "must be finite and >= 0"));
        }
        for (field, v) in [
            ("systolic_amp", self.systolic_amp),
            ("dicrotic_amp", self.dicrotic_amp),
            ("baseline_wander_amp", self.baseline_wander_amp),
        ] {
            if !v.is_finite() {
                return Err(Error::config(field, "must be finite"));
            }
        }
        Ok(())
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::for_class(ClassLabel::Wakeful)
    }
}

fn gaussian(t: f64, centre: f64, width: f64) -> f64 {
    let z = (t - centre) / width;
    (-0.5 * z * z).exp()
}

/// Generates a labelled synthetic PPG trace.
///
/// Each beat contributes a systolic and a dicrotic Gaussian lobe. Inter-beat
/// intervals are `60/hr` plus Gaussian jitter whose standard deviation is the
/// first-order propagation of `heart_rate_sd_bpm` (`60*sd/hr^2`), so the mean
/// interval stays at `60/hr`. Beats start one interval before `t = 0` and run
/// past the end so edges look like the interior.
pub fn synthesize_ppg(cfg: &SynthConfig, class: ClassLabel) -> Result<PpgSignal> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = (cfg.duration_s * cfg.fs).round() as usize;
    if n == 0 {
        return Err(Error::config("duration_s", "yields zero samples"));
    }
    let fs = cfg.fs;
    let wander_phase = rng.gen::<f64>() * std::f64::consts::TAU;

    let mean_ibi = 60.0 / cfg.heart_rate_mean_bpm;
    let ibi_sd = 60.0 * cfg.heart_rate_sd_bpm / (cfg.heart_rate_mean_bpm * cfg.heart_rate_mean_bpm);
    let end = cfg.duration_s + 1.0;
    let mut onsets = Vec::new();
    let mut t = -mean_ibi;
    while t < end {
        onsets.push(t);
        let z: f64 = rng.sample(StandardNormal);
        t += (mean_ibi + ibi_sd * z).max(MIN_IBI_S);
    }

    let mut samples: Vec<f64> = (0..n)
        .map(|i| {
            let ti = i as f64 / fs;
            cfg.baseline_wander_amp
                * (std::f64::consts::TAU * cfg.baseline_wander_freq_hz * ti + wander_phase).sin()
        })
        .collect();

    let lobes = [
        (SYSTOLIC_RISE_S, SYSTOLIC_WIDTH_S, cfg.systolic_amp),
        (SYSTOLIC_RISE_S + cfg.dicrotic_delay_s, DICROTIC_WIDTH_S, cfg.dicrotic_amp),
    ];
    for &onset in &onsets {
        for &(offset, width, amp) in &lobes {
            let centre = onset + offset;
            let lo = ((centre - 12.0 * width) * fs).floor().max(0.0) as usize;
            let hi = (((centre + 12.0 * width) * fs).ceil().max(0.0) as usize).min(n);
            for (i, s) in samples.iter_mut().enumerate().take(hi).skip(lo) {
                *s += amp * gaussian(i as f64 / fs, centre, width);
            }
        }
    }

    if cfg.noise_sd > 0.0 {
        for s in samples.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *s += cfg.noise_sd * z;
        }
    }

    Ok(PpgSignal::new(samples, fs)?.with_label(class))
}

/// Central-difference derivative of order 1 or 2, scaled to units per second
/// (per second squared). Endpoints use one-sided differences so the output
/// has the input's length.
pub fn derivative(sig: &PpgSignal, order: u8) -> Result<PpgSignal> {
    let x = sig.samples();
    let n = x.len();
    let fs = sig.fs();
    let out = match order {
        1 => {
            if n < 2 {
                return Err(Error::Precondition("first derivative needs >= 2 samples".into()));
            }
            let mut d = vec![0.0; n];
            d[0] = (x[1] - x[0]) * fs;
            d[n - 1] = (x[n - 1] - x[n - 2]) * fs;
            for i in 1..n - 1 {
                d[i] = (x[i + 1] - x[i - 1]) * 0.5 * fs;
            }
            d
        }
        2 => {
            if n < 3 {
                return Err(Error::Precondition("second derivative needs >= 3 samples".into()));
            }
            let fs2 = fs * fs;
            let mut d = vec![0.0; n];
            d[0] = (x[0] - 2.0 * x[1] + x[2]) * fs2;
            d[n - 1] = (x[n - 1] - 2.0 * x[n - 2] + x[n - 3]) * fs2;
            for i in 1..n - 1 {
                d[i] = (x[i + 1] - 2.0 * x[i] + x[i - 1]) * fs2;
            }
            d
        }
        other => {
            return Err(Error::Precondition(format!(
                "derivative order must be 1 or 2, got {other}"
            )))
        }
    };
    Ok(sig.with_samples(out))
}

/// One beat: minimum to next minimum, with the systolic maximum in between.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Waveform {
    pub start_idx: usize,
    pub peak_idx: usize,
    pub end_idx: usize,
}

pub const DEFAULT_MIN_SEPARATION_S: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ExtremumKind {
    Max,
    Min,
}

#[derive(Debug, Clone, Copy)]
struct Extremum {
    idx: usize,
    kind: ExtremumKind,
}

pub fn segment_waveforms(sig: &PpgSignal) -> Result<Vec<Waveform>> {
    segment_waveforms_with(sig, DEFAULT_MIN_SEPARATION_S)
}

/// Segments a trace into min-to-min waveforms.
///
/// Extrema are located at sign changes of the central first derivative and
/// classified by the sign of the second derivative. An extremum within
/// `min_separation_s` of a stronger one of the same kind is dropped, and runs
/// of same-kind extrema collapse to the strongest so maxima and minima
/// alternate.
pub fn segment_waveforms_with(sig: &PpgSignal, min_separation_s: f64) -> Result<Vec<Waveform>> {
    if sig.len() < 3 {
        return Err(Error::Precondition("segmentation needs >= 3 samples".into()));
    }
    let x = sig.samples();
    let d1 = derivative(sig, 1)?;
    let d2 = derivative(sig, 2)?;
    let d1 = d1.samples();
    let d2 = d2.samples();

    let mut candidates = Vec::new();
    let mut last_sign = 0i8;
    let mut last_nonzero = 0usize;
    for (i, &d) in d1.iter().enumerate() {
        let sign = if d > 0.0 {
            1
        } else if d < 0.0 {
            -1
        } else {
            0
        };
        if sign == 0 {
            continue;
        }
        if last_sign != 0 && sign != last_sign {
            let rising_to_falling = last_sign > 0;
            let span = last_nonzero..=i;
            let idx = if rising_to_falling {
                argmax_in(x, span)
            } else {
                argmin_in(x, span)
            };
            let kind = if d2[idx] < 0.0 {
                ExtremumKind::Max
            } else if d2[idx] > 0.0 {
                ExtremumKind::Min
            } else if rising_to_falling {
                ExtremumKind::Max
            } else {
                ExtremumKind::Min
            };
            candidates.push(Extremum { idx, kind });
        }
        last_sign = sign;
        last_nonzero = i;
    }

    let sep = (min_separation_s * sig.fs()).round() as usize;
    let maxima = suppress(x, &candidates, ExtremumKind::Max, sep);
    let minima = suppress(x, &candidates, ExtremumKind::Min, sep);
    let mut kept: Vec<Extremum> = maxima.into_iter().chain(minima).collect();
    kept.sort_by_key(|e| e.idx);

    let mut alternating: Vec<Extremum> = Vec::with_capacity(kept.len());
    for e in kept {
        match alternating.last_mut() {
            Some(prev) if prev.kind == e.kind => {
                if stronger(x, e, *prev) {
                    *prev = e;
                }
            }
            _ => alternating.push(e),
        }
    }

    let mut out = Vec::new();
    for w in alternating.windows(3) {
        if let [a, b, c] = w {
            if a.kind == ExtremumKind::Min && b.kind == ExtremumKind::Max && c.kind == ExtremumKind::Min {
                out.push(Waveform {
                    start_idx: a.idx,
                    peak_idx: b.idx,
                    end_idx: c.idx,
                });
            }
        }
    }
    Ok(out)
}

fn stronger(x: &[f64], a: Extremum, b: Extremum) -> bool {
    match a.kind {
        ExtremumKind::Max => x[a.idx] > x[b.idx],
        ExtremumKind::Min => x[a.idx] < x[b.idx],
    }
}

fn suppress(x: &[f64], candidates: &[Extremum], kind: ExtremumKind, sep: usize) -> Vec<Extremum> {
    let mut pool: Vec<Extremum> = candidates.iter().copied().filter(|e| e.kind == kind).collect();
    // strongest first; earlier index wins ties
    pool.sort_by(|a, b| {
        let (va, vb) = (x[a.idx], x[b.idx]);
        let ord = match kind {
            ExtremumKind::Max => vb.total_cmp(&va),
            ExtremumKind::Min => va.total_cmp(&vb),
        };
        ord.then(a.idx.cmp(&b.idx))
    });
    let mut kept: Vec<Extremum> = Vec::new();
    for e in pool {
        if kept.iter().all(|k| k.idx.abs_diff(e.idx) > sep) {
            kept.push(e);
        }
    }
    kept
}

fn argmax_in(x: &[f64], span: std::ops::RangeInclusive<usize>) -> usize {
    span.fold(None::<usize>, |best, i| match best {
        Some(b) if x[b] >= x[i] => Some(b),
        _ => Some(i),
    })
    .unwrap_or(0)
}

fn argmin_in(x: &[f64], span: std::ops::RangeInclusive<usize>) -> usize {
    span.fold(None::<usize>, |best, i| match best {
        Some(b) if x[b] <= x[i] => Some(b),
        _ => Some(i),
    })
    .unwrap_or(0)
}
