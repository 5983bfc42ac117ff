//! Two hyper-filtering layers producing a 22-channel view of one signal.
//!
//! Layer one sweeps the low-pass cutoff behind a fixed 0.5 Hz high-pass;
//! layer two sweeps the high-pass cutoff ahead of a fixed 7 Hz low-pass.

use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{design_butterworth, FilterKind, LinearFilter, SosCascade};
use crate::signal::{PpgSignal, DEFAULT_FS};

pub const BANDS_PER_LAYER: usize = 11;
pub const NUM_CHANNELS: usize = 2 * BANDS_PER_LAYER;

/// Low-pass sweep of the first layer; `0` at f1 means "no low-pass stage".
pub const LP_LAYER_CUTOFFS_HZ: [f64; BANDS_PER_LAYER] = [0.0, 1.4, 2.9, 2.5, 3.8, 3.9, 4.0, 4.5, 5.0, 5.3, 6.9];
/// High-pass sweep of the second layer.
pub const HP_LAYER_CUTOFFS_HZ: [f64; BANDS_PER_LAYER] = [0.5, 1.2, 2.6, 2.7, 3.3, 3.5, 4.0, 4.4, 5.0, 5.7, 6.4];
pub const LP_LAYER_FIXED_HP_HZ: f64 = 0.5;
pub const HP_LAYER_FIXED_LP_HZ: f64 = 7.0;
pub const DEFAULT_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Layer {
    /// Swept low-pass, fixed high-pass.
    LowPassSweep,
    /// Swept high-pass, fixed low-pass.
    HighPassSweep,
}

impl Layer {
    pub fn short_name(self) -> &'static str {
        match self {
            Layer::LowPassSweep => "LP",
            Layer::HighPassSweep => "HP",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperBankConfig {
    pub fixed_hp_hz: f64,
    pub lp_cutoffs_hz: Vec<f64>,
    pub fixed_lp_hz: f64,
    pub hp_cutoffs_hz: Vec<f64>,
    pub order: usize,
    pub fs: f64,
}

impl Default for HyperBankConfig {
    fn default() -> Self {
        Self {
            fixed_hp_hz: LP_LAYER_FIXED_HP_HZ,
            lp_cutoffs_hz: LP_LAYER_CUTOFFS_HZ.to_vec(),
            fixed_lp_hz: HP_LAYER_FIXED_LP_HZ,
            hp_cutoffs_hz: HP_LAYER_CUTOFFS_HZ.to_vec(),
            order: DEFAULT_ORDER,
            fs: DEFAULT_FS,
        }
    }
}

/// Where a channel sits in the bank and what it passes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelMeta {
    pub layer: Layer,
    /// 1-based band index within the layer.
    pub band_index: usize,
    pub hp_hz: f64,
    /// `None` when the channel has no low-pass stage.
    pub lp_hz: Option<f64>,
}

impl HyperBankConfig {
    pub fn num_channels(&self) -> usize {
        self.lp_cutoffs_hz.len() + self.hp_cutoffs_hz.len()
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.fs / 2.0;
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(Error::config("fs", "must be positive"));
        }
        if self.order == 0 {
            return Err(Error::config("order", "must be >= 1"));
        }
        let in_band = |f: f64| f > 0.0 && f < nyquist;
        if !in_band(self.fixed_hp_hz) {
            return Err(Error::config("fixed_hp_hz", format!("must lie in (0, {nyquist})")));
        }
        if !in_band(self.fixed_lp_hz) {
            return Err(Error::config("fixed_lp_hz", format!("must lie in (0, {nyquist})")));
        }
        if self.lp_cutoffs_hz.iter().any(|&f| f != 0.0 && !in_band(f)) {
            return Err(Error::config("lp_cutoffs_hz", format!("nonzero cutoffs must lie in (0, {nyquist})")));
        }
        if self.hp_cutoffs_hz.iter().any(|&f| !in_band(f)) {
            return Err(Error::config("hp_cutoffs_hz", format!("cutoffs must lie in (0, {nyquist})")));
        }
        if self.num_channels() == 0 {
            return Err(Error::config("lp_cutoffs_hz", "bank has no channels"));
        }
        Ok(())
    }

    /// Layer, band and effective passband of `channel` (LP layer first).
    pub fn band_descriptor(&self, channel: usize) -> Result<ChannelMeta> {
        let n_lp = self.lp_cutoffs_hz.len();
        if channel < n_lp {
            let lp = self.lp_cutoffs_hz[channel];
            Ok(ChannelMeta {
                layer: Layer::LowPassSweep,
                band_index: channel + 1,
                hp_hz: self.fixed_hp_hz,
                lp_hz: (lp != 0.0).then_some(lp),
            })
        } else if channel < self.num_channels() {
            let j = channel - n_lp;
            Ok(ChannelMeta {
                layer: Layer::HighPassSweep,
                band_index: j + 1,
                hp_hz: self.hp_cutoffs_hz[j],
                lp_hz: Some(self.fixed_lp_hz),
            })
        } else {
            Err(Error::Usage(format!(
                "channel {channel} out of range 0..{}",
                self.num_channels()
            )))
        }
    }
}

/// One channel's filter chain: high-pass, then an optional low-pass.
#[derive(Debug, Clone)]
pub struct ChannelChain {
    pub meta: ChannelMeta,
    pub highpass: SosCascade,
    pub lowpass: Option<SosCascade>,
}

impl ChannelChain {
    pub fn response_at(&self, f_hz: f64) -> Complex64 {
        let hp = self.highpass.response_at(f_hz);
        match &self.lowpass {
            Some(lp) => hp * lp.response_at(f_hz),
            None => hp,
        }
    }

    fn run(&self, x: &[f64]) -> Vec<f64> {
        let mut hp = self.highpass.clone();
        hp.reset();
        let mut out = vec![0.0; x.len()];
        hp.process(x, &mut out);
        if let Some(lp) = &self.lowpass {
            let mut lp = lp.clone();
            lp.reset();
            let stage = out.clone();
            lp.process(&stage, &mut out);
        }
        out
    }
}

/// Designed filter bank, ready to apply to any number of signals.
#[derive(Debug, Clone)]
pub struct HyperBank {
    config: HyperBankConfig,
    chains: Vec<ChannelChain>,
}

impl HyperBank {
    pub fn new(config: HyperBankConfig) -> Result<Self> {
        config.validate()?;
        let chains = (0..config.num_channels())
            .map(|ch| {
                let meta = config.band_descriptor(ch)?;
                let highpass = design_butterworth(FilterKind::HighPass, meta.hp_hz, config.order, config.fs)?;
                let lowpass = meta
                    .lp_hz
                    .map(|lp| design_butterworth(FilterKind::LowPass, lp, config.order, config.fs))
                    .transpose()?;
                Ok(ChannelChain {
                    meta,
                    highpass,
                    lowpass,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, chains })
    }

    pub fn config(&self) -> &HyperBankConfig {
        &self.config
    }

    pub fn chains(&self) -> &[ChannelChain] {
        &self.chains
    }

    pub fn num_channels(&self) -> usize {
        self.chains.len()
    }

    /// Combined complex response of one channel.
    pub fn channel_response(&self, channel: usize, freqs_hz: &[f64]) -> Result<Vec<Complex64>> {
        let chain = self
            .chains
            .get(channel)
            .ok_or_else(|| Error::Usage(format!("channel {channel} out of range")))?;
        let nyquist = self.config.fs / 2.0;
        if let Some(f) = freqs_hz.iter().find(|f| !(**f >= 0.0 && **f <= nyquist)) {
            return Err(Error::Usage(format!("frequency {f} Hz outside [0, {nyquist}]")));
        }
        Ok(freqs_hz.iter().map(|&f| chain.response_at(f)).collect())
    }

    /// Filters `sig` through every channel. Channels run in parallel, each on
    /// its own copy of the cascade state; output order is the channel order.
    pub fn apply(&self, sig: &PpgSignal) -> Result<HyperFiltered> {
        if (sig.fs() - self.config.fs).abs() > 1e-9 * self.config.fs {
            return Err(Error::Usage(format!(
                "bank designed for fs={} applied to signal at fs={}",
                self.config.fs,
                sig.fs()
            )));
        }
        let x = sig.samples();
        let channels: Vec<Vec<f64>> = self.chains.par_iter().map(|c| c.run(x)).collect();
        Ok(HyperFiltered {
            channels,
            channel_meta: self.chains.iter().map(|c| c.meta).collect(),
            fs: sig.fs(),
        })
    }
}

/// Convenience wrapper: design the bank from `cfg` and apply it once.
pub fn apply_hyperbank(cfg: &HyperBankConfig, sig: &PpgSignal) -> Result<HyperFiltered> {
    HyperBank::new(cfg.clone())?.apply(sig)
}

/// Channel-major output of the bank: `channels[c][t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperFiltered {
    pub channels: Vec<Vec<f64>>,
    pub channel_meta: Vec<ChannelMeta>,
    pub fs: f64,
}

impl HyperFiltered {
    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes `T` rows of comma-separated channel values with a `ch0,...` header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.num_channels()).map(|c| format!("ch{c}")).collect();
        writeln!(w, "{}", header.join(","))?;
        let mut line = String::new();
        for t in 0..self.len() {
            line.clear();
            for (c, ch) in self.channels.iter().enumerate() {
                if c > 0 {
                    line.push(',');
                }
                line.push_str(&ch[t].to_string());
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Metadata sidecar for [`Self::write_csv`].
    pub fn meta_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            fs: f64,
            samples: usize,
            channels: &'a [ChannelMeta],
        }
        Ok(serde_json::to_string_pretty(&Sidecar {
            fs: self.fs,
            samples: self.len(),
            channels: &self.channel_meta,
        })?)
    }
}
