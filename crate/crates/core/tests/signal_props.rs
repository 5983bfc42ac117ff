use std::f64::consts::PI;

use drowsy_core::signal::{derivative, segment_waveforms, synthesize_ppg};
use drowsy_core::{ClassLabel, PpgSignal, SynthConfig};
use proptest::prelude::*;

fn class() -> impl Strategy<Value = ClassLabel> {
    prop_oneof![Just(ClassLabel::Drowsy), Just(ClassLabel::Wakeful)]
}

fn short(class: ClassLabel, seed: u64, secs: f64) -> SynthConfig {
    let mut c = SynthConfig::for_class(class).with_seed(seed);
    c.duration_s = secs;
    c
}

/// Strict local maxima / minima by neighbour comparison; a flat top of two
/// equal samples reports its first sample.
fn brute_extrema(x: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let mut maxima = Vec::new();
    let mut minima = Vec::new();
    for i in 1..x.len() - 1 {
        if x[i] > x[i - 1] && x[i] >= x[i + 1] {
            maxima.push(i);
        }
        if x[i] < x[i - 1] && x[i] <= x[i + 1] {
            minima.push(i);
        }
    }
    (maxima, minima)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn generator_is_deterministic(c in class(), seed in any::<u64>(), secs in 0.5f64..4.0) {
        let cfg = short(c, seed, secs);
        let a = synthesize_ppg(&cfg, c).unwrap();
        let b = synthesize_ppg(&cfg, c).unwrap();
        prop_assert_eq!(a.samples(), b.samples());
        prop_assert_eq!(a.len(), (secs * 1000.0).round() as usize);
    }

    #[test]
    fn waveforms_are_ordered_and_nested(c in class(), seed in any::<u64>()) {
        let sig = synthesize_ppg(&short(c, seed, 8.0), c).unwrap();
        let w = segment_waveforms(&sig).unwrap();
        prop_assert!(!w.is_empty());
        for wf in &w {
            prop_assert!(wf.start_idx < wf.peak_idx && wf.peak_idx < wf.end_idx);
        }
        for pair in w.windows(2) {
            // neighbours may share a boundary minimum but never overlap
            prop_assert!(pair[0].end_idx <= pair[1].start_idx);
            prop_assert!(pair[0].start_idx < pair[1].start_idx);
        }
    }

    #[test]
    fn sine_segmentation_matches_brute_force(
        f in 0.5f64..1.8,
        phase in 0.0f64..(2.0 * PI),
        amp in 0.1f64..5.0,
        offset in -3.0f64..3.0,
        secs in 3.0f64..8.0,
    ) {
        let fs = 1000.0;
        let n = (secs * fs) as usize;
        let x: Vec<f64> = (0..n).map(|i| offset + amp * (2.0 * PI * f * i as f64 / fs + phase).sin()).collect();
        let w = segment_waveforms(&PpgSignal::new(x.clone(), fs).unwrap()).unwrap();
        let (maxima, minima) = brute_extrema(&x);
        let mut expected = Vec::new();
        for pair in minima.windows(2) {
            if let Some(&p) = maxima.iter().find(|&&m| m > pair[0] && m < pair[1]) {
                expected.push((pair[0], p, pair[1]));
            }
        }
        prop_assert_eq!(w.len(), expected.len());
        for (got, (s, p, e)) in w.iter().zip(expected) {
            prop_assert!(got.start_idx.abs_diff(s) <= 1);
            prop_assert!(got.peak_idx.abs_diff(p) <= 1);
            prop_assert!(got.end_idx.abs_diff(e) <= 1);
        }
    }

    #[test]
    fn repeated_first_difference_tracks_second(
        comps in prop::collection::vec((0.1f64..5.0, 0.0f64..(2.0 * PI), 0.0f64..1.0), 1..5),
        secs in 0.5f64..3.0,
    ) {
        let fs = 1000.0;
        let total: f64 = comps.iter().map(|c| c.2).sum::<f64>().max(1e-9);
        let n = (secs * fs) as usize;
        let x: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / fs;
                comps.iter().map(|&(f, ph, a)| a / total * (2.0 * PI * f * t + ph).sin()).sum()
            })
            .collect();
        let sig = PpgSignal::new(x, fs).unwrap();
        let d11 = derivative(&derivative(&sig, 1).unwrap(), 1).unwrap();
        let d2 = derivative(&sig, 2).unwrap();
        let tol = 1e-6 * fs * fs;
        for i in 2..n - 2 {
            prop_assert!((d11.samples()[i] - d2.samples()[i]).abs() <= tol, "i={}", i);
        }
    }
}

#[test]
fn drowsy_seed_42_mean_interval_within_three_sigma() {
    let cfg = SynthConfig::for_class(ClassLabel::Drowsy).with_seed(42);
    let sig = synthesize_ppg(&cfg, ClassLabel::Drowsy).unwrap();
    let x = sig.samples();
    // Oracle: upward crossings of a threshold halfway between the 5th and
    // 95th percentiles, with a refractory period; a beat is the first
    // crossing after each refractory window.
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = sorted[sorted.len() / 20];
    let hi = sorted[sorted.len() * 19 / 20];
    let thr = 0.5 * (lo + hi);
    let refractory = 400;
    let mut crossings = Vec::new();
    for i in 1..x.len() {
        if x[i - 1] < thr && x[i] >= thr && crossings.last().map_or(true, |&c: &usize| i - c > refractory) {
            crossings.push(i);
        }
    }
    let ibis: Vec<f64> = crossings.windows(2).map(|w| (w[1] - w[0]) as f64 / cfg.fs).collect();
    let mean = ibis.iter().sum::<f64>() / ibis.len() as f64;
    let expected = 60.0 / cfg.heart_rate_mean_bpm;
    let sd = 60.0 * cfg.heart_rate_sd_bpm / cfg.heart_rate_mean_bpm.powi(2);
    let sigma_mean = sd / (ibis.len() as f64).sqrt();
    assert!(ibis.len() > 250, "{} intervals", ibis.len());
    assert!(
        (mean - expected).abs() <= 3.0 * sigma_mean,
        "mean {mean} expected {expected} +/- {}",
        3.0 * sigma_mean
    );
}
