//! Browser bindings: synthesize and hyper-filter a trace, and inspect filter
//! responses. Results are flat `Float64Array`s so the page can plot them
//! without any glue beyond wasm-bindgen.

use drowsy_core::filters::{butterworth_magnitude, apply_causal, design_fir, frequency_response, linear_grid, magnitude_db, FirSpec};
use drowsy_core::hyperbank::{HyperBank, HyperBankConfig, NUM_CHANNELS};
use drowsy_core::signal::{synthesize_ppg, ClassLabel, SynthConfig};
use wasm_bindgen::prelude::*;

type Res<T> = Result<T, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn js<T>(r: Res<T>) -> Result<T, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

/// `seconds` of synthetic PPG for `class_name` ("Drowsy" or "Wakeful"),
/// followed by the same trace through hyper-bank `channel`. Both halves are
/// decimated by `step`.
pub fn synth_and_filter_impl(class_name: &str, seconds: f64, seed: u64, channel: usize, step: usize) -> Res<Vec<f64>> {
    let label: ClassLabel = class_name.parse().map_err(err)?;
    if !(seconds > 0.0 && seconds <= 120.0) {
        return Err(err("seconds must lie in (0, 120]"));
    }
    if channel >= NUM_CHANNELS {
        return Err(err(format!("channel must be below {NUM_CHANNELS}")));
    }
    let step = step.max(1);
    let mut cfg = SynthConfig::for_class(label).with_seed(seed);
    cfg.duration_s = seconds;
    let sig = synthesize_ppg(&cfg, label).map_err(err)?;
    let bank = HyperBank::new(HyperBankConfig::default()).map_err(err)?;
    let chain = &bank.chains()[channel];
    let mut out: Vec<f64> = sig.samples().iter().step_by(step).copied().collect();
    let filtered = apply_causal(&mut chain.highpass.clone(), &sig).map_err(err)?;
    let filtered = match &chain.lowpass {
        Some(lp) => apply_causal(&mut lp.clone(), &filtered).map_err(err)?,
        None => filtered,
    };
    out.extend(filtered.samples().iter().step_by(step));
    Ok(out)
}

/// Magnitude of hyper-bank `channel` at `n` frequencies in `[0, f_max_hz]`:
/// frequencies, then the realised filter's magnitude, then the analog
/// Butterworth closed form.
pub fn channel_response_impl(channel: usize, f_max_hz: f64, n: usize) -> Res<Vec<f64>> {
    let bank = HyperBank::new(HyperBankConfig::default()).map_err(err)?;
    let fs = bank.config().fs;
    if !(f_max_hz > 0.0 && f_max_hz <= fs / 2.0) || n < 2 {
        return Err(err("need 0 < f_max_hz <= fs/2 and n >= 2"));
    }
    let freqs: Vec<f64> = (0..n).map(|i| f_max_hz * i as f64 / (n - 1) as f64).collect();
    let measured = bank.channel_response(channel, &freqs).map_err(err)?;
    let chain = &bank.chains()[channel];
    let closed = freqs.iter().map(|&f| {
        let hp = butterworth_magnitude(chain.highpass.design(), f, false);
        let lp = chain
            .lowpass
            .as_ref()
            .map_or(1.0, |l| butterworth_magnitude(l.design(), f, false));
        hp * lp
    });
    let mut out = freqs.clone();
    out.extend(measured.iter().map(|h| h.norm()));
    out.extend(closed);
    Ok(out)
}

/// Human-readable cutoffs of a hyper-bank channel.
pub fn channel_label_impl(channel: usize) -> Res<String> {
    let m = HyperBankConfig::default().band_descriptor(channel).map_err(err)?;
    let lp = m.lp_hz.map_or("none".to_string(), |v| format!("{v} Hz"));
    Ok(format!("{}{}: high-pass {} Hz, low-pass {}", m.layer.short_name(), m.band_index, m.hp_hz, lp))
}

/// Response of a pre-filter ("lowpass" or "highpass") in dB on `n` points
/// from 0 to `f_max_hz`: frequencies, then magnitudes. The last element is
/// the tap count.
pub fn prefilter_response_impl(kind: &str, f_max_hz: f64, n: usize) -> Res<Vec<f64>> {
    let spec = match kind {
        "lowpass" => FirSpec::ppg_lowpass(),
        "highpass" => FirSpec::ppg_highpass(),
        _ => return Err(err("kind must be lowpass or highpass")),
    };
    let fir = design_fir(&spec).map_err(err)?;
    if !(f_max_hz > 0.0 && f_max_hz <= spec.fs / 2.0) || n < 2 {
        return Err(err("need 0 < f_max_hz <= fs/2 and n >= 2"));
    }
    let scale = f_max_hz / (spec.fs / 2.0);
    let freqs: Vec<f64> = linear_grid(spec.fs, n).into_iter().map(|f| f * scale).collect();
    let h = frequency_response(&fir, &freqs).map_err(err)?;
    let mut out = freqs;
    out.extend(h.iter().map(|z| magnitude_db(*z)));
    out.push(fir.len() as f64);
    Ok(out)
}

#[wasm_bindgen]
pub fn synth_and_filter(class_name: &str, seconds: f64, seed: u64, channel: usize, step: usize) -> Result<Vec<f64>, JsValue> {
    js(synth_and_filter_impl(class_name, seconds, seed, channel, step))
}

#[wasm_bindgen]
pub fn channel_response(channel: usize, f_max_hz: f64, n: usize) -> Result<Vec<f64>, JsValue> {
    js(channel_response_impl(channel, f_max_hz, n))
}

#[wasm_bindgen]
pub fn channel_label(channel: usize) -> Result<String, JsValue> {
    js(channel_label_impl(channel))
}

#[wasm_bindgen]
pub fn prefilter_response(kind: &str, f_max_hz: f64, n: usize) -> Result<Vec<f64>, JsValue> {
    js(prefilter_response_impl(kind, f_max_hz, n))
}
