//! Fixed-shape training tensors cut from hyper-filtered signals.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyperbank::HyperFiltered;
use crate::signal::ClassLabel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowParams {
    pub window_s: f64,
    pub hop_s: f64,
    /// Keep every `decim`-th sample inside a window.
    pub decim: usize,
    /// Leading seconds discarded to skip filter start-up transients.
    pub transient_skip_s: f64,
}

impl Default for WindowParams {
    fn default() -> Self {
        Self {
            window_s: 4.0,
            hop_s: 4.0,
            decim: 10,
            transient_skip_s: 2.0,
        }
    }
}

impl WindowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_s > 0.0 && self.window_s.is_finite()) {
            return Err(Error::config("window_s", "must be > 0"));
        }
        if !(self.hop_s > 0.0 && self.hop_s.is_finite()) {
            return Err(Error::config("hop_s", "must be > 0"));
        }
        if self.decim == 0 {
            return Err(Error::config("decim", "must be >= 1"));
        }
        if !(self.transient_skip_s >= 0.0 && self.transient_skip_s.is_finite()) {
            return Err(Error::config("transient_skip_s", "must be >= 0"));
        }
        Ok(())
    }

    /// Decimated window length `round(window_s * fs / decim)`.
    pub fn pattern_len(&self, fs: f64) -> usize {
        (self.window_s * fs / self.decim as f64).round() as usize
    }

    /// Number of windows a signal of `n` samples yields.
    pub fn window_count(&self, n: usize, fs: f64) -> usize {
        let skip = (self.transient_skip_s * fs).round() as usize;
        let win = (self.window_s * fs).round() as usize;
        let hop = ((self.hop_s * fs).round() as usize).max(1);
        if n < skip + win || win == 0 {
            0
        } else {
            (n - skip - win) / hop + 1
        }
    }
}

/// `examples x channels x length` array of z-normalised windows.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternTensor {
    data: Vec<f32>,
    n_channels: usize,
    length: usize,
    pub labels: Vec<ClassLabel>,
    /// Source signal of each example; the unit of leakage-free splitting.
    pub subjects: Vec<u32>,
    /// Hyper-bank channel index carried by each tensor channel.
    pub channel_ids: Vec<usize>,
    pub window_s: f64,
    pub fs_effective: f64,
}

impl PatternTensor {
    pub fn new(
        data: Vec<f32>,
        n_channels: usize,
        length: usize,
        labels: Vec<ClassLabel>,
        subjects: Vec<u32>,
        window_s: f64,
        fs_effective: f64,
    ) -> Result<Self> {
        let n = labels.len();
        if subjects.len() != n {
            return Err(Error::Data(format!("{} labels but {} subject ids", n, subjects.len())));
        }
        if data.len() != n * n_channels * length {
            return Err(Error::Data(format!(
                "data holds {} values, expected {n} x {n_channels} x {length}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("pattern data contains non-finite values".into()));
        }
        Ok(Self {
            data,
            n_channels,
            length,
            labels,
            subjects,
            channel_ids: (0..n_channels).collect(),
            window_s,
            fs_effective,
        })
    }

    pub fn empty(n_channels: usize, length: usize, window_s: f64, fs_effective: f64) -> Self {
        Self {
            data: Vec::new(),
            n_channels,
            length,
            labels: Vec::new(),
            subjects: Vec::new(),
            channel_ids: (0..n_channels).collect(),
            window_s,
            fs_effective,
        }
    }

    pub fn with_channel_ids(mut self, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != self.n_channels {
            return Err(Error::Data(format!("{} channel ids for {} channels", ids.len(), self.n_channels)));
        }
        self.channel_ids = ids;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.len(), self.n_channels, self.length]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Channel-major slice of one example (`channels x length`).
    pub fn example(&self, i: usize) -> &[f32] {
        let stride = self.n_channels * self.length;
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let mut counts = [0; 2];
        for l in &self.labels {
            counts[l.index()] += 1;
        }
        counts
    }

    pub fn has_both_classes(&self) -> bool {
        let c = self.class_counts();
        c[0] > 0 && c[1] > 0
    }

    /// Examples at `indices`, in that order.
    pub fn select_examples(&self, indices: &[usize]) -> Self {
        let stride = self.n_channels * self.length;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(self.example(i));
        }
        Self {
            data,
            n_channels: self.n_channels,
            length: self.length,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            subjects: indices.iter().map(|&i| self.subjects[i]).collect(),
            channel_ids: self.channel_ids.clone(),
            window_s: self.window_s,
            fs_effective: self.fs_effective,
        }
    }

    /// Keeps tensor channels at `positions`, in that order.
    pub fn select_channels(&self, positions: &[usize]) -> Result<Self> {
        if let Some(p) = positions.iter().find(|&&p| p >= self.n_channels) {
            return Err(Error::Usage(format!("channel position {p} out of range 0..{}", self.n_channels)));
        }
        let mut data = Vec::with_capacity(self.len() * positions.len() * self.length);
        for i in 0..self.len() {
            let ex = self.example(i);
            for &p in positions {
                data.extend_from_slice(&ex[p * self.length..(p + 1) * self.length]);
            }
        }
        Ok(Self {
            data,
            n_channels: positions.len(),
            length: self.length,
            labels: self.labels.clone(),
            subjects: self.subjects.clone(),
            channel_ids: positions.iter().map(|&p| self.channel_ids[p]).collect(),
            window_s: self.window_s,
            fs_effective: self.fs_effective,
        })
    }

    /// Appends examples in order. Shapes and channel ids must agree.
    pub fn concat(parts: &[PatternTensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Data("nothing to concatenate".into()))?;
        let mut out = Self::empty(first.n_channels, first.length, first.window_s, first.fs_effective);
        out.channel_ids = first.channel_ids.clone();
        for p in parts {
            if p.n_channels != out.n_channels || p.length != out.length || p.channel_ids != out.channel_ids {
                return Err(Error::Data("pattern tensors disagree on shape".into()));
            }
            out.data.extend_from_slice(&p.data);
            out.labels.extend_from_slice(&p.labels);
            out.subjects.extend_from_slice(&p.subjects);
        }
        Ok(out)
    }

    /// Writes `meta.json` and little-endian `data.f32` (C order, E x C x L).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = TensorMeta {
            shape: self.shape(),
            window_s: self.window_s,
            fs_effective: self.fs_effective,
            labels: self.labels.clone(),
            subjects: self.subjects.clone(),
            channel_ids: self.channel_ids.clone(),
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        let mut w = BufWriter::new(fs::File::create(dir.join("data.f32"))?);
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: TensorMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        let mut bytes = Vec::new();
        fs::File::open(dir.join("data.f32"))?.read_to_end(&mut bytes)?;
        let [e, c, l] = meta.shape;
        if bytes.len() != e * c * l * 4 {
            return Err(Error::Data(format!(
                "data.f32 holds {} bytes, meta.json implies {}",
                bytes.len(),
                e * c * l * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        PatternTensor::new(data, c, l, meta.labels, meta.subjects, meta.window_s, meta.fs_effective)?
            .with_channel_ids(meta.channel_ids)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    shape: [usize; 3],
    window_s: f64,
    fs_effective: f64,
    labels: Vec<ClassLabel>,
    subjects: Vec<u32>,
    channel_ids: Vec<usize>,
}

/// Result of [`extract_patterns`]. `too_short` flags a signal that yielded no
/// window; the tensor is then empty.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub tensor: PatternTensor,
    pub too_short: bool,
}

/// Z-normalises `x` in place (population moments). Constant input becomes zeros.
pub fn z_normalize(x: &mut [f64]) {
    let n = x.len() as f64;
    if x.is_empty() {
        return;
    }
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd <= 4.0 * f64::EPSILON * mean.abs() || sd == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
    } else {
        x.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
}

/// Slides a window over every channel after the transient skip, decimates
/// each window and z-normalises every (example, channel) independently.
pub fn extract_patterns(hf: &HyperFiltered, label: ClassLabel, subject: u32, params: &WindowParams) -> Result<Extraction> {
    params.validate()?;
    let fs = hf.fs;
    let len = params.pattern_len(fs);
    if len == 0 {
        return Err(Error::config("window_s", "window shorter than one decimated sample"));
    }
    let fs_effective = fs / params.decim as f64;
    let n_channels = hf.num_channels();
    let mut tensor = PatternTensor::empty(n_channels, len, params.window_s, fs_effective);
    let count = params.window_count(hf.len(), fs);
    if count == 0 {
        return Ok(Extraction {
            tensor,
            too_short: true,
        });
    }
    let skip = (params.transient_skip_s * fs).round() as usize;
    let hop = ((params.hop_s * fs).round() as usize).max(1);
    tensor.data.reserve(count * n_channels * len);
    let mut buf = vec![0.0f64; len];
    for w in 0..count {
        let start = skip + w * hop;
        for ch in &hf.channels {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = ch[start + k * params.decim];
            }
            z_normalize(&mut buf);
            tensor.data.extend(buf.iter().map(|&v| v as f32));
        }
        tensor.labels.push(label);
        tensor.subjects.push(subject);
    }
    Ok(Extraction {
        tensor,
        too_short: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
    pub by_subject: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            seed: 0,
            stratified: true,
            by_subject: true,
        }
    }
}

/// Largest-remainder allocation of `round(frac * total)` training units
/// across classes, keeping at least one unit per class on each side.
fn allocate(counts: &[usize], frac: f64) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let target = ((frac * total as f64).round() as usize).clamp(1, total.saturating_sub(1).max(1));
    let quotas: Vec<f64> = counts.iter().map(|&n| frac * n as f64).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut assigned: usize = alloc.iter().sum();
    for &c in order.iter().cycle().take(order.len() * 2) {
        if assigned >= target {
            break;
        }
        if alloc[c] < counts[c] {
            alloc[c] += 1;
            assigned += 1;
        }
    }
    for (a, &n) in alloc.iter_mut().zip(counts) {
        if n >= 2 {
            *a = (*a).clamp(1, n - 1);
        }
    }
    alloc
}

/// Deterministic train/test partition of example indices.
///
/// With `by_subject`, whole subjects move together; with `stratified`,
/// each class is allocated separately so class proportions stay within one
/// unit of exact.
pub fn split_indices(data: &PatternTensor, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if data.is_empty() {
        return Err(Error::Split("dataset is empty".into()));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::config("train_fraction", "must lie in (0, 1)"));
    }
    // unit id -> (class, example indices)
    let mut units: BTreeMap<u64, (ClassLabel, Vec<usize>)> = BTreeMap::new();
    for i in 0..data.len() {
        let key = if spec.by_subject { data.subjects[i] as u64 } else { i as u64 };
        units.entry(key).or_insert_with(|| (data.labels[i], Vec::new())).1.push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train_units = Vec::new();
    let mut test_units = Vec::new();
    if spec.stratified {
        let mut per_class: Vec<Vec<u64>> = vec![Vec::new(); 2];
        for (&k, (label, _)) in &units {
            per_class[label.index()].push(k);
        }
        for (c, keys) in per_class.iter().enumerate() {
            if !keys.is_empty() && keys.len() < 2 {
                let unit = if spec.by_subject { "subjects" } else { "examples" };
                return Err(Error::Split(format!(
                    "class {} has {} {unit}; stratified splitting needs at least 2",
                    ClassLabel::from_index(c).expect("two classes"),
                    keys.len()
                )));
            }
        }
        let counts: Vec<usize> = per_class.iter().map(Vec::len).collect();
        let alloc = allocate(&counts, spec.train_fraction);
        for (mut keys, n_train) in per_class.into_iter().zip(alloc) {
            keys.shuffle(&mut rng);
            test_units.extend_from_slice(&keys[n_train..]);
            train_units.extend(keys.into_iter().take(n_train));
        }
    } else {
        let mut keys: Vec<u64> = units.keys().copied().collect();
        if keys.len() < 2 {
            return Err(Error::Split("need at least 2 units to split".into()));
        }
        let n_train = allocate(&[keys.len()], spec.train_fraction)[0];
        keys.shuffle(&mut rng);
        test_units.extend_from_slice(&keys[n_train..]);
        train_units.extend(keys.into_iter().take(n_train));
    }
    let gather = |keys: &[u64]| {
        let mut idx: Vec<usize> = keys.iter().flat_map(|k| units[k].1.iter().copied()).collect();
        idx.sort_unstable();
        idx
    };
    Ok((gather(&train_units), gather(&test_units)))
}

pub fn split(data: &PatternTensor, spec: &SplitSpec) -> Result<(PatternTensor, PatternTensor)> {
    let (train, test) = split_indices(data, spec)?;
    Ok((data.select_examples(&train), data.select_examples(&test)))
}
