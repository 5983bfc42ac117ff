//! End-to-end orchestration: cohort synthesis, preprocessing, training,
//! evaluation and stand-alone band search, plus the on-disk artifacts.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bandselect::{run_band_search, BandAction, BandSearchConfig, SearchOutcome};
use crate::error::{Error, Result};
use crate::filters::{apply_causal, design_fir, FirFilter, FirSpec};
use crate::hyperbank::{HyperBank, HyperBankConfig, Layer};
use crate::patterns::{extract_patterns, split_indices, PatternTensor, SplitSpec, WindowParams};
use crate::signal::{synthesize_ppg, ClassLabel, PpgSignal, SynthConfig};
use crate::tcn::{self, predict_tensor, save_checkpoint, EpochRecord, History, TcnConfig, TcnModel, TrainConfig};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SIGNALS_DIR: &str = "signals";

/// Synthetic cohort: `n_per_class` subjects of each class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n_per_class: usize,
    pub drowsy: SynthConfig,
    pub wakeful: SynthConfig,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_per_class: 35,
            drowsy: SynthConfig::for_class(ClassLabel::Drowsy),
            wakeful: SynthConfig::for_class(ClassLabel::Wakeful),
        }
    }
}

impl CohortConfig {
    pub fn class(&self, label: ClassLabel) -> &SynthConfig {
        match label {
            ClassLabel::Drowsy => &self.drowsy,
            ClassLabel::Wakeful => &self.wakeful,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrefilterConfig {
    pub enabled: bool,
    pub highpass: FirSpec,
    pub lowpass: FirSpec,
}

impl Default for PrefilterConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            highpass: FirSpec::ppg_highpass(),
            lowpass: FirSpec::ppg_lowpass(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandsMode {
    #[default]
    All,
    Search,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct BandsConfig {
    pub mode: BandsMode,
    pub search: BandSearchConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Truncate test signals to this many seconds before windowing.
    pub clip_seconds: Option<f64>,
}

/// Every knob of a run. Component seeds are derived from `seed` by
/// [`RunConfig::resolve`]; the resolved values are what `run_config.json`
/// records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub cohort: CohortConfig,
    pub prefilter: PrefilterConfig,
    pub hyperbank: HyperBankConfig,
    pub patterns: WindowParams,
    pub split: SplitSpec,
    pub bands: BandsConfig,
    pub tcn: TcnConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub init_seed: u64,
    pub search_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            out_dir: None,
            cohort: CohortConfig::default(),
            prefilter: PrefilterConfig::default(),
            hyperbank: HyperBankConfig::default(),
            patterns: WindowParams::default(),
            split: SplitSpec::default(),
            bands: BandsConfig::default(),
            tcn: TcnConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            init_seed: 0,
            search_seed: 0,
        };
        c.resolve();
        c
    }
}

const STREAM_DROWSY: u64 = 1;
const STREAM_WAKEFUL: u64 = 2;
const STREAM_SPLIT: u64 = 3;
const STREAM_INIT: u64 = 4;
const STREAM_TRAIN: u64 = 5;
const STREAM_SEARCH: u64 = 6;

/// A 64-bit seed for `(stream, index)`, drawn from a ChaCha8 stream keyed by
/// `seed`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r.set_word_pos(2 * index as u128);
    r.next_u64()
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Overwrites every component seed with one derived from `seed`.
    pub fn resolve(&mut self) {
        let s = self.seed;
        self.cohort.drowsy.seed = derive_seed(s, STREAM_DROWSY, 0);
        self.cohort.wakeful.seed = derive_seed(s, STREAM_WAKEFUL, 0);
        self.split.seed = derive_seed(s, STREAM_SPLIT, 0);
        self.init_seed = derive_seed(s, STREAM_INIT, 0);
        self.train.seed = derive_seed(s, STREAM_TRAIN, 0);
        self.search_seed = derive_seed(s, STREAM_SEARCH, 0);
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolve();
        self
    }

    /// Parses a possibly partial config. Omitted fields, at any depth, keep
    /// their defaults (class-specific ones included). Seeds are re-derived.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let over: Value = serde_json::from_str(text)?;
        if !over.is_object() {
            return Err(Error::config("config", "must be a JSON object"));
        }
        let mut base = serde_json::to_value(RunConfig::default())?;
        merge(&mut base, over);
        let mut cfg: RunConfig = serde_json::from_value(base)?;
        cfg.resolve();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        crate::json::to_string_f64_exact(self)
    }

    pub fn fs(&self) -> f64 {
        self.hyperbank.fs
    }

    pub fn validate(&self) -> Result<()> {
        if self.cohort.n_per_class == 0 {
            return Err(Error::config("cohort.n_per_class", "must be >= 1"));
        }
        self.cohort.drowsy.validate()?;
        self.cohort.wakeful.validate()?;
        let fs = self.fs();
        for (field, v) in [
            ("cohort.drowsy.fs", self.cohort.drowsy.fs),
            ("cohort.wakeful.fs", self.cohort.wakeful.fs),
            ("prefilter.highpass.fs", self.prefilter.highpass.fs),
            ("prefilter.lowpass.fs", self.prefilter.lowpass.fs),
        ] {
            if v != fs {
                return Err(Error::config(field, format!("{v} differs from hyperbank.fs = {fs}")));
            }
        }
        if self.prefilter.enabled {
            self.prefilter.highpass.validate()?;
            self.prefilter.lowpass.validate()?;
        }
        self.hyperbank.validate()?;
        self.patterns.validate()?;
        self.bands.search.reward.validate()?;
        self.train.validate()?;
        if let Some(c) = self.eval.clip_seconds {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("eval.clip_seconds", "must be > 0"));
            }
        }
        let mut t = self.tcn.clone();
        t.in_channels = 1;
        t.validate()
    }

    fn state_window(&self) -> WindowParams {
        let w = self.bands.search.state_window_s;
        WindowParams {
            window_s: w,
            hop_s: w,
            ..self.patterns.clone()
        }
    }
}

/// One subject of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: u32,
    pub label: ClassLabel,
    pub file: String,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub fs: f64,
    pub subjects: Vec<SubjectRecord>,
}

impl Manifest {
    pub fn subject(&self, id: u32) -> Option<&SubjectRecord> {
        self.subjects.iter().find(|s| s.id == id)
    }
}

/// A cohort either on disk (manifest plus CSV files) or regenerated on demand
/// from the per-subject seeds.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    root: Option<PathBuf>,
    cohort: CohortConfig,
}

impl Dataset {
    /// In-memory synthetic cohort: drowsy subjects first, then wakeful.
    pub fn synthetic(cohort: &CohortConfig) -> Result<Self> {
        if cohort.n_per_class == 0 {
            return Err(Error::config("cohort.n_per_class", "must be >= 1"));
        }
        let mut subjects = Vec::with_capacity(2 * cohort.n_per_class);
        for label in ClassLabel::ALL {
            let c = cohort.class(label);
            c.validate()?;
            for k in 0..cohort.n_per_class {
                let id = subjects.len() as u32;
                subjects.push(SubjectRecord {
                    id,
                    label,
                    file: format!("{SIGNALS_DIR}/subject_{id:03}.csv"),
                    n_samples: (c.duration_s * c.fs).round() as usize,
                    seed: derive_seed(c.seed, 0, k as u64),
                });
            }
        }
        if cohort.drowsy.fs != cohort.wakeful.fs {
            return Err(Error::config("cohort.wakeful.fs", "both classes must share one sampling rate"));
        }
        Ok(Self {
            manifest: Manifest {
                fs: cohort.drowsy.fs,
                subjects,
            },
            root: None,
            cohort: cohort.clone(),
        })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        Ok(Self {
            manifest,
            root: Some(dir.to_path_buf()),
            cohort: CohortConfig::default(),
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn len(&self) -> usize {
        self.manifest.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.subjects.is_empty()
    }

    pub fn signal(&self, rec: &SubjectRecord) -> Result<PpgSignal> {
        let sig = match &self.root {
            Some(root) => {
                let f = fs::File::open(root.join(&rec.file))?;
                PpgSignal::read_csv(BufReader::new(f))?
            }
            None => {
                let cfg = self.cohort.class(rec.label).clone().with_seed(rec.seed);
                synthesize_ppg(&cfg, rec.label)?
            }
        };
        Ok(sig.with_label(rec.label).with_subject(rec.id.to_string()))
    }

    /// Writes the manifest and one CSV per subject into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join(SIGNALS_DIR))?;
        for rec in &self.manifest.subjects {
            let sig = self.signal(rec)?;
            let mut w = BufWriter::new(fs::File::create(dir.join(&rec.file))?);
            sig.write_csv(&mut w)?;
            w.flush()?;
        }
        crate::json::to_writer_f64_exact(fs::File::create(dir.join(MANIFEST_FILE))?, &self.manifest)?;
        Ok(())
    }
}

/// Synthesizes the configured cohort into `dir`.
pub fn synth_dataset(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    let ds = Dataset::synthetic(&cfg.cohort)?;
    ds.write(dir)?;
    Dataset::open(dir)
}

/// Pre-filter, hyper-bank and windowing shared by every subject.
pub struct Preprocessor {
    prefilter: Option<(FirFilter, FirFilter)>,
    bank: HyperBank,
}

impl Preprocessor {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let prefilter = if cfg.prefilter.enabled {
            Some((design_fir(&cfg.prefilter.highpass)?, design_fir(&cfg.prefilter.lowpass)?))
        } else {
            None
        };
        Ok(Self {
            prefilter,
            bank: HyperBank::new(cfg.hyperbank.clone())?,
        })
    }

    /// Pattern tensors of one subject, one per entry of `windows`.
    pub fn subject_patterns(
        &self,
        sig: &PpgSignal,
        label: ClassLabel,
        subject: u32,
        windows: &[WindowParams],
    ) -> Result<Vec<PatternTensor>> {
        if sig.fs() != self.bank.config().fs {
            return Err(Error::Mismatch(format!(
                "subject {subject} sampled at {} Hz, pipeline configured for {} Hz",
                sig.fs(),
                self.bank.config().fs
            )));
        }
        let filtered = match &self.prefilter {
            Some((hp, lp)) => {
                let s = apply_causal(&mut hp.clone(), sig)?;
                apply_causal(&mut lp.clone(), &s)?
            }
            None => sig.clone(),
        };
        let hf = self.bank.apply(&filtered)?;
        windows
            .iter()
            .map(|w| {
                let ex = extract_patterns(&hf, label, subject, w)?;
                if ex.too_short {
                    return Err(Error::Data(format!(
                        "subject {subject}: {:.1} s of signal is too short for one {} s window",
                        sig.duration_s(),
                        w.window_s
                    )));
                }
                Ok(ex.tensor)
            })
            .collect()
    }
}

/// Windows every listed subject; `out[k]` holds the tensors for `windows[k]`.
/// Subjects are processed in parallel, results kept in subject order.
pub fn extract_subjects(
    pre: &Preprocessor,
    ds: &Dataset,
    subjects: &[&SubjectRecord],
    windows: &[WindowParams],
    clip_seconds: Option<f64>,
) -> Result<Vec<PatternTensor>> {
    let per_subject: Vec<Vec<PatternTensor>> = subjects
        .par_iter()
        .map(|rec| {
            let mut sig = ds.signal(rec)?;
            if let Some(c) = clip_seconds {
                sig = sig.truncated(c);
            }
            pre.subject_patterns(&sig, rec.label, rec.id, windows)
        })
        .collect::<Result<_>>()?;
    (0..windows.len())
        .map(|k| {
            let parts: Vec<PatternTensor> = per_subject.iter().map(|v| v[k].clone()).collect();
            PatternTensor::concat(&parts)
        })
        .collect()
}

/// Subject ids on each side of the split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub train_subjects: Vec<u32>,
    pub test_subjects: Vec<u32>,
    pub n_train: usize,
    pub n_test: usize,
}

/// A selected band with its cutoffs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandEntry {
    pub layer: Layer,
    pub index: usize,
    pub channel: usize,
    pub hp_hz: f64,
    pub lp_hz: Option<f64>,
}

pub fn band_entries(hb: &HyperBankConfig, channels: &[usize]) -> Result<Vec<BandEntry>> {
    channels
        .iter()
        .map(|&c| {
            let m = hb.band_descriptor(c)?;
            Ok(BandEntry {
                layer: m.layer,
                index: m.band_index,
                channel: c,
                hp_hz: m.hp_hz,
                lp_hz: m.lp_hz,
            })
        })
        .collect()
}

fn distinct_subjects(t: &PatternTensor, idx: &[usize]) -> Vec<u32> {
    let mut s: Vec<u32> = idx.iter().map(|&i| t.subjects[i]).collect();
    s.sort_unstable();
    s.dedup();
    s
}

pub struct TrainOutcome {
    pub config: RunConfig,
    pub model: TcnModel<f32>,
    pub history: History,
    pub split: SplitRecord,
    pub channels: Vec<usize>,
    pub search: Option<SearchOutcome>,
    /// Held-out windows, channel-selected, ready for [`evaluate`].
    pub test: PatternTensor,
}

/// Progress messages from a long run.
pub type Progress<'a> = &'a mut dyn FnMut(&str);

fn check_cohort(ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Data("dataset has no subjects".into()));
    }
    for label in ClassLabel::ALL {
        if !ds.manifest.subjects.iter().any(|s| s.label == label) {
            return Err(Error::Data(format!("dataset has no {label} subjects")));
        }
    }
    Ok(())
}

fn write_jsonl_lines(path: &Path, s: &SearchOutcome) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for rec in &s.log {
        writeln!(w, "{}", serde_json::to_string(rec)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Preprocess, split by subject, optionally search bands on the training
/// subjects, train, and (when `out` is given) write all artifacts.
pub fn run_train(cfg: &RunConfig, ds: &Dataset, out: Option<&Path>, progress: Progress) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_cohort(ds)?;
    if ds.manifest.fs != cfg.fs() {
        return Err(Error::Mismatch(format!(
            "dataset sampled at {} Hz, config expects {} Hz",
            ds.manifest.fs,
            cfg.fs()
        )));
    }
    let pre = Preprocessor::new(cfg)?;
    let mut windows = vec![cfg.patterns.clone()];
    let search = cfg.bands.mode == BandsMode::Search;
    if search {
        windows.push(cfg.state_window());
    }
    let all: Vec<&SubjectRecord> = ds.manifest.subjects.iter().collect();
    let mut tensors = extract_subjects(&pre, ds, &all, &windows, None)?;
    let data = tensors.remove(0);
    progress(&format!("preprocessed {} subjects into {} windows", all.len(), data.len()));

    let (tr, te) = split_indices(&data, &cfg.split)?;
    let split = SplitRecord {
        train_subjects: distinct_subjects(&data, &tr),
        test_subjects: distinct_subjects(&data, &te),
        n_train: tr.len(),
        n_test: te.len(),
    };
    let train_all = data.select_examples(&tr);
    let test_all = data.select_examples(&te);

    let outcome = if search {
        let state = tensors.remove(0);
        let keep: Vec<usize> = (0..state.len())
            .filter(|&i| split.train_subjects.binary_search(&state.subjects[i]).is_ok())
            .collect();
        let state = state.select_examples(&keep);
        progress(&format!("band search: {} episodes on {} windows", cfg.bands.search.episodes, state.len()));
        Some(run_band_search(&state, &cfg.bands.search, cfg.search_seed, None)?)
    } else {
        None
    };
    let channels: Vec<usize> = match &outcome {
        Some(o) => o.best_bands.iter().map(|b| b.index()).collect(),
        None => (0..data.n_channels()).collect(),
    };
    let train_set = train_all.select_channels(&channels)?;
    let test = test_all.select_channels(&channels)?;

    let mut resolved = cfg.clone();
    resolved.tcn.in_channels = channels.len();
    let mut model = TcnModel::<f32>::new(resolved.tcn.clone(), resolved.init_seed)?;
    let history = tcn::train_observed(&mut model, &train_set, Some(&test), &resolved.train, &mut |r: &EpochRecord| {
        let val = r.val_acc.map(|v| format!(" val_acc {v:.4}")).unwrap_or_default();
        progress(&format!(
            "epoch {} loss {:.4} acc {:.4}{val}",
            r.epoch, r.train_loss, r.train_acc
        ));
    })?;

    let result = TrainOutcome {
        config: resolved,
        model,
        history,
        split,
        channels,
        search: outcome,
        test,
    };
    if let Some(dir) = out {
        write_train_artifacts(&result, dir)?;
    }
    Ok(result)
}

pub fn write_train_artifacts(r: &TrainOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RUN_CONFIG_FILE), r.config.to_json()?)?;
    save_checkpoint(&r.model, dir)?;
    r.history.write_csv(BufWriter::new(fs::File::create(dir.join("history.csv"))?))?;
    fs::write(dir.join("split.json"), serde_json::to_string_pretty(&r.split)?)?;
    let bands = band_entries(&r.config.hyperbank, &r.channels)?;
    fs::write(dir.join("bands.json"), crate::json::to_string_f64_exact(&bands)?)?;
    if let Some(s) = &r.search {
        write_jsonl_lines(&dir.join("band_search.jsonl"), s)?;
        fs::write(dir.join("q_table.json"), s.table.to_json()?)?;
    }
    Ok(())
}

/// Per-class accuracies keyed by class name.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    #[serde(rename = "Drowsy")]
    pub drowsy: f64,
    #[serde(rename = "Wakeful")]
    pub wakeful: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub method: String,
    pub drowsy_pct: f64,
    pub wakeful_pct: f64,
    pub note: String,
}

pub const REFERENCE_NOTE: &str = "paper-reported, private dataset";

pub fn reference_rows() -> Vec<ReferenceRow> {
    [("Proposed", 98.71, 99.03), ("Prior work", 96.50, 98.40)]
        .into_iter()
        .map(|(m, d, w)| ReferenceRow {
            method: m.into(),
            drowsy_pct: d,
            wakeful_pct: w,
            note: REFERENCE_NOTE.into(),
        })
        .collect()
}

/// Test-split metrics. `confusion_matrix[true][predicted]`, class order
/// Drowsy, Wakeful. A class with no test windows gets a NaN accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_accuracy: ClassAccuracy,
    pub overall_accuracy: f64,
    pub confusion_matrix: [[usize; 2]; 2],
    pub n_train: usize,
    pub n_test: usize,
    pub clip_seconds: Option<f64>,
    pub reference_rows: Vec<ReferenceRow>,
}

impl EvalReport {
    pub fn from_confusion(cm: [[usize; 2]; 2], n_train: usize, clip_seconds: Option<f64>) -> Self {
        let acc = |c: usize| cm[c][c] as f64 / (cm[c][0] + cm[c][1]) as f64;
        let n_test = cm.iter().flatten().sum::<usize>();
        Self {
            per_class_accuracy: ClassAccuracy {
                drowsy: acc(0),
                wakeful: acc(1),
            },
            overall_accuracy: (cm[0][0] + cm[1][1]) as f64 / n_test as f64,
            confusion_matrix: cm,
            n_train,
            n_test,
            clip_seconds,
            reference_rows: reference_rows(),
        }
    }

    /// Console table: this run next to the reference rows.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<44} {:>9} {:>9}\n", "method", "Drowsy", "Wakeful"));
        s.push_str(&format!(
            "{:<44} {:>8.2}% {:>8.2}%\n",
            "this run (synthetic cohort)",
            100.0 * self.per_class_accuracy.drowsy,
            100.0 * self.per_class_accuracy.wakeful
        ));
        for r in &self.reference_rows {
            s.push_str(&format!(
                "{:<44} {:>8.2}% {:>8.2}%\n",
                format!("{} ({})", r.method, r.note),
                r.drowsy_pct,
                r.wakeful_pct
            ));
        }
        let cm = self.confusion_matrix;
        s.push_str(&format!(
            "overall {:.4}  n_train {}  n_test {}\nconfusion (rows true D/W, cols predicted D/W): [{} {}] [{} {}]\n",
            self.overall_accuracy, self.n_train, self.n_test, cm[0][0], cm[0][1], cm[1][0], cm[1][1]
        ));
        s
    }
}

/// Scores `model` on `test`.
pub fn evaluate(model: &TcnModel<f32>, test: &PatternTensor, n_train: usize, clip: Option<f64>) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Data("no test windows to evaluate".into()));
    }
    if test.n_channels() != model.config.in_channels {
        return Err(Error::Mismatch(format!(
            "test data has {} channels, model expects {}",
            test.n_channels(),
            model.config.in_channels
        )));
    }
    let p = predict_tensor(model, test)?;
    let mut cm = [[0usize; 2]; 2];
    for (&pred, truth) in p.labels.iter().zip(&test.labels) {
        cm[truth.index()][pred] += 1;
    }
    Ok(EvalReport::from_confusion(cm, n_train, clip))
}

/// Everything `eval` needs from a training output directory.
pub struct TrainedRun {
    pub config: RunConfig,
    pub model: TcnModel<f32>,
    pub split: SplitRecord,
    pub channels: Vec<usize>,
}

impl TrainedRun {
    /// Loads a run directory. `config` overrides its `run_config.json`; the
    /// checkpoint must then still agree with it.
    pub fn load(dir: &Path, config: Option<RunConfig>) -> Result<Self> {
        let config = match config {
            Some(c) => c,
            None => RunConfig::load(&dir.join(RUN_CONFIG_FILE))?,
        };
        let model = tcn::load_checkpoint(dir)?;
        let split: SplitRecord = serde_json::from_str(&fs::read_to_string(dir.join("split.json"))?)?;
        let bands: Vec<BandEntry> = serde_json::from_str(&fs::read_to_string(dir.join("bands.json"))?)?;
        let channels: Vec<usize> = bands.iter().map(|b| b.channel).collect();
        let run = Self {
            config,
            model,
            split,
            channels,
        };
        run.check()?;
        Ok(run)
    }

    fn check(&self) -> Result<()> {
        let mut expected = self.config.tcn.clone();
        expected.in_channels = self.channels.len();
        if self.model.config != expected {
            return Err(Error::Mismatch(format!(
                "checkpoint architecture {:?} disagrees with config {:?}",
                self.model.config, expected
            )));
        }
        for &c in &self.channels {
            self.config
                .hyperbank
                .band_descriptor(c)
                .map_err(|e| Error::Mismatch(format!("bands.json: {e}")))?;
        }
        Ok(())
    }
}

/// Scores a trained run on the test subjects of `ds`.
pub fn run_eval(run: &TrainedRun, ds: &Dataset, clip_seconds: Option<f64>) -> Result<EvalReport> {
    if ds.manifest.fs != run.config.fs() {
        return Err(Error::Mismatch(format!(
            "dataset sampled at {} Hz, run trained at {} Hz",
            ds.manifest.fs,
            run.config.fs()
        )));
    }
    let mut subjects = Vec::with_capacity(run.split.test_subjects.len());
    for &id in &run.split.test_subjects {
        let rec = ds
            .manifest
            .subject(id)
            .ok_or_else(|| Error::Mismatch(format!("test subject {id} is not in the dataset")))?;
        subjects.push(rec);
    }
    if subjects.is_empty() {
        return Err(Error::Data("run has no test subjects".into()));
    }
    let pre = Preprocessor::new(&run.config)?;
    let data = extract_subjects(&pre, ds, &subjects, std::slice::from_ref(&run.config.patterns), clip_seconds)?
        .remove(0);
    let test = data.select_channels(&run.channels)?;
    evaluate(&run.model, &test, run.split.n_train, clip_seconds)
}

/// Result of a stand-alone band search.
pub struct BandsOutcome {
    pub search: SearchOutcome,
    pub best: Vec<BandEntry>,
}

/// Band search over a dataset (windowed at the state length) or over a
/// saved pattern tensor. Writes the log, table, bands and config to `out`.
pub fn run_bands(cfg: &RunConfig, input: &Path, out: Option<&Path>, progress: Progress) -> Result<BandsOutcome> {
    cfg.validate()?;
    let data = if input.join("meta.json").is_file() {
        PatternTensor::load(input)?
    } else {
        let ds = Dataset::open(input)?;
        check_cohort(&ds)?;
        let pre = Preprocessor::new(cfg)?;
        let all: Vec<&SubjectRecord> = ds.manifest.subjects.iter().collect();
        extract_subjects(&pre, &ds, &all, &[cfg.state_window()], None)?.remove(0)
    };
    if !data.has_both_classes() {
        return Err(Error::Data("band search needs windows of both classes".into()));
    }
    progress(&format!("band search: {} episodes on {} windows", cfg.bands.search.episodes, data.len()));
    let search = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut w = BufWriter::new(fs::File::create(dir.join("band_search.jsonl"))?);
            let s = run_band_search(&data, &cfg.bands.search, cfg.search_seed, Some(&mut w))?;
            w.flush()?;
            s
        }
        None => run_band_search(&data, &cfg.bands.search, cfg.search_seed, None)?,
    };
    let channels: Vec<usize> = search.best_bands.iter().map(|b: &BandAction| b.index()).collect();
    let best = band_entries(&cfg.hyperbank, &channels)?;
    if let Some(dir) = out {
        fs::write(dir.join("best_bands.json"), crate::json::to_string_f64_exact(&best)?)?;
        fs::write(dir.join("q_table.json"), search.table.to_json()?)?;
        fs::write(dir.join(RUN_CONFIG_FILE), cfg.to_json()?)?;
    }
    Ok(BandsOutcome { search, best })
}
