//! Tabular Q-learning over band subsets.
//!
//! A state is the set of bands chosen so far (a bitmask), an action adds one
//! more band, and the reward of a step is the change in a classifier score.
//! Episodes end after `max_bands` picks.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyperbank::{Layer, BANDS_PER_LAYER, NUM_CHANNELS};
use crate::patterns::{split_indices, PatternTensor, SplitSpec};
use crate::tcn::{self, Mode, TcnConfig, TcnModel, TrainConfig};

/// One (layer, band) column of the hyper-filter tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BandAction {
    pub layer: Layer,
    /// 1-based column, `1..=11`.
    pub band_index: usize,
}

impl BandAction {
    pub fn new(layer: Layer, band_index: usize) -> Result<Self> {
        if !(1..=BANDS_PER_LAYER).contains(&band_index) {
            return Err(Error::Usage(format!("band index {band_index} outside 1..={BANDS_PER_LAYER}")));
        }
        Ok(Self { layer, band_index })
    }

    /// Position in `0..22`, equal to the hyper-bank channel index.
    pub fn index(self) -> usize {
        let base = match self.layer {
            Layer::LowPassSweep => 0,
            Layer::HighPassSweep => BANDS_PER_LAYER,
        };
        base + self.band_index - 1
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            _ if i < BANDS_PER_LAYER => Self::new(Layer::LowPassSweep, i + 1),
            _ if i < NUM_CHANNELS => Self::new(Layer::HighPassSweep, i - BANDS_PER_LAYER + 1),
            _ => Err(Error::Usage(format!("action index {i} outside 0..{NUM_CHANNELS}"))),
        }
    }

    pub fn label(self) -> String {
        format!("{}{}", self.layer.short_name(), self.band_index)
    }
}

/// Bands selected so far. `step` is the number of set bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct BandState {
    pub selected: u32,
}

impl BandState {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn step(self) -> usize {
        self.selected.count_ones() as usize
    }

    pub fn contains(self, a: BandAction) -> bool {
        self.selected & (1 << a.index()) != 0
    }

    pub fn with(self, a: BandAction) -> Result<Self> {
        if self.contains(a) {
            return Err(Error::Usage(format!("band {} already selected", a.label())));
        }
        Ok(Self {
            selected: self.selected | (1 << a.index()),
        })
    }

    /// Selected bands in index order.
    pub fn bands(self) -> Vec<BandAction> {
        (0..NUM_CHANNELS)
            .filter(|i| self.selected & (1 << i) != 0)
            .map(|i| BandAction::from_index(i).expect("index < 22"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    q: BTreeMap<(u32, u8), f64>,
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
    /// Episode length; states with this many bands are terminal.
    pub max_bands: usize,
    /// Actions are the first `n_actions` band indices.
    pub n_actions: usize,
}

impl QTable {
    pub const DEFAULT_ALPHA: f64 = 0.1;
    pub const DEFAULT_GAMMA: f64 = 0.9;

    pub fn new(alpha: f64, gamma: f64, epsilon: f64, max_bands: usize, n_actions: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::config("alpha", "must lie in (0, 1]"));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::config("gamma", "must lie strictly inside (0, 1)"));
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::config("epsilon", "must lie in [0, 1]"));
        }
        if !(1..=NUM_CHANNELS).contains(&n_actions) {
            return Err(Error::config("n_actions", format!("must lie in 1..={NUM_CHANNELS}")));
        }
        if !(1..=n_actions).contains(&max_bands) {
            return Err(Error::config("max_bands", format!("must lie in 1..={n_actions}")));
        }
        Ok(Self {
            q: BTreeMap::new(),
            alpha,
            gamma,
            epsilon,
            max_bands,
            n_actions,
        })
    }

    /// Defaults (alpha 0.1, gamma 0.9, epsilon 1) over all 22 bands.
    pub fn with_defaults(max_bands: usize) -> Result<Self> {
        Self::new(Self::DEFAULT_ALPHA, Self::DEFAULT_GAMMA, 1.0, max_bands, NUM_CHANNELS)
    }

    /// Unseen entries read as 0.
    pub fn get(&self, s: BandState, a: BandAction) -> f64 {
        self.q.get(&(s.selected, a.index() as u8)).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, s: BandState, a: BandAction, v: f64) {
        self.q.insert((s.selected, a.index() as u8), v);
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn is_terminal(&self, s: BandState) -> bool {
        s.step() >= self.max_bands
    }

    /// Unselected actions in index order; none once terminal.
    pub fn legal_actions(&self, s: BandState) -> Vec<BandAction> {
        if self.is_terminal(s) {
            return Vec::new();
        }
        (0..self.n_actions)
            .map(|i| BandAction::from_index(i).expect("n_actions <= 22"))
            .filter(|&a| !s.contains(a))
            .collect()
    }

    /// `max_a q(s, a)` over legal actions, 0 for terminal states.
    pub fn max_q(&self, s: BandState) -> f64 {
        self.legal_actions(s)
            .into_iter()
            .map(|a| self.get(s, a))
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
            .unwrap_or(0.0)
    }

    /// `q(s,a) += alpha * (r + gamma * max q(s_next, .) - q(s,a))`.
    pub fn q_update(&mut self, s: BandState, a: BandAction, r: f64, s_next: BandState) -> Result<()> {
        if s.contains(a) || a.index() >= self.n_actions {
            return Err(Error::Usage(format!("illegal action {} in state {:#x}", a.label(), s.selected)));
        }
        let old = self.get(s, a);
        let target = r + self.gamma * self.max_q(s_next);
        self.set(s, a, old + self.alpha * (target - old));
        Ok(())
    }

    /// Highest-valued legal action, ties to the lowest index.
    pub fn greedy_action(&self, s: BandState) -> Result<BandAction> {
        let legal = self.legal_actions(s);
        let mut best = *legal.first().ok_or_else(|| Error::Usage("no legal actions left".into()))?;
        for &a in &legal[1..] {
            if self.get(s, a) > self.get(s, best) {
                best = a;
            }
        }
        Ok(best)
    }

    /// Epsilon-greedy: uniform over legal actions with probability epsilon.
    pub fn select_action<R: Rng>(&self, s: BandState, rng: &mut R) -> Result<BandAction> {
        let legal = self.legal_actions(s);
        if legal.is_empty() {
            return Err(Error::Usage("no legal actions left".into()));
        }
        if rng.gen::<f64>() < self.epsilon {
            Ok(*legal.choose(rng).expect("non-empty"))
        } else {
            self.greedy_action(s)
        }
    }

    /// Follows the greedy policy from the empty state to a terminal one.
    pub fn greedy_rollout(&self) -> Vec<BandAction> {
        let mut s = BandState::empty();
        let mut out = Vec::new();
        while let Ok(a) = self.greedy_action(s) {
            out.push(a);
            s = s.with(a).expect("legal action");
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Entry {
            state: u32,
            action: String,
            q: f64,
        }
        #[derive(Serialize)]
        struct Out<'a> {
            alpha: f64,
            gamma: f64,
            epsilon: f64,
            max_bands: usize,
            n_actions: usize,
            entries: &'a [Entry],
        }
        let entries: Vec<Entry> = self
            .q
            .iter()
            .map(|(&(s, a), &q)| Entry {
                state: s,
                action: BandAction::from_index(a as usize).expect("stored index").label(),
                q,
            })
            .collect();
        Ok(serde_json::to_string_pretty(&Out {
            alpha: self.alpha,
            gamma: self.gamma,
            epsilon: self.epsilon,
            max_bands: self.max_bands,
            n_actions: self.n_actions,
            entries: &entries,
        })?)
    }
}

/// Scores a band subset. The empty subset is the baseline.
pub trait BandScorer {
    fn score(&mut self, bands: &[BandAction]) -> Result<f64>;
}

impl<F: FnMut(&[BandAction]) -> Result<f64>> BandScorer for F {
    fn score(&mut self, bands: &[BandAction]) -> Result<f64> {
        self(bands)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardMode {
    NegValidationLoss,
    ValidationAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardSpec {
    pub mode: RewardMode,
    /// Validation windows scored per probe.
    pub eval_windows: usize,
    pub probe_epochs: usize,
    /// Training windows per probe (evenly spaced subsample).
    pub train_windows: usize,
    pub probe_blocks: usize,
    pub probe_channels: usize,
    pub probe_learning_rate: f64,
    pub probe_batch_size: usize,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            mode: RewardMode::NegValidationLoss,
            eval_windows: 256,
            probe_epochs: 3,
            train_windows: 256,
            probe_blocks: 4,
            probe_channels: 8,
            probe_learning_rate: 5e-3,
            probe_batch_size: 16,
        }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        if self.eval_windows == 0 {
            return Err(Error::config("eval_windows", "must be >= 1"));
        }
        if self.probe_epochs == 0 {
            return Err(Error::config("probe_epochs", "must be >= 1"));
        }
        if self.train_windows == 0 {
            return Err(Error::config("train_windows", "must be >= 1"));
        }
        if self.probe_blocks == 0 || self.probe_channels == 0 || self.probe_batch_size == 0 {
            return Err(Error::config("probe", "blocks, channels and batch size must be >= 1"));
        }
        Ok(())
    }

    /// Reduced TCN used for scoring `in_channels` bands.
    pub fn probe_config(&self, in_channels: usize) -> TcnConfig {
        TcnConfig::doubling(self.probe_blocks, self.probe_channels, in_channels)
    }
}

fn evenly_spaced(idx: &[usize], cap: usize) -> Vec<usize> {
    if idx.len() <= cap {
        return idx.to_vec();
    }
    (0..cap).map(|k| idx[k * idx.len() / cap]).collect()
}

/// Score of a trained probe on validation windows.
pub fn probe_reward(model: &TcnModel<f32>, val: &PatternTensor, mode: RewardMode) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Usage("no validation windows".into()));
    }
    let pred = tcn::predict_tensor(model, val)?;
    Ok(match mode {
        RewardMode::ValidationAccuracy => {
            let ok = pred.labels.iter().zip(&val.labels).filter(|(&p, l)| p == l.index()).count();
            ok as f64 / val.len() as f64
        }
        RewardMode::NegValidationLoss => {
            let ce: f64 = pred
                .probs
                .iter()
                .zip(&val.labels)
                .map(|(p, l)| -(p[l.index()] as f64).max(f64::MIN_POSITIVE).ln())
                .sum();
            -ce / val.len() as f64
        }
    })
}

/// Trains probes on subsets of a pattern tensor's channels and scores them
/// on a held-out, subject-disjoint part.
pub struct ProbeScorer {
    train: PatternTensor,
    val: PatternTensor,
    spec: RewardSpec,
    seed: u64,
}

impl ProbeScorer {
    pub fn new(data: &PatternTensor, spec: RewardSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        if !data.has_both_classes() {
            return Err(Error::Usage("band scoring needs both classes".into()));
        }
        let split = SplitSpec {
            seed,
            ..Default::default()
        };
        let (tr, va) = split_indices(data, &split)?;
        let train = data.select_examples(&evenly_spaced(&tr, spec.train_windows));
        let val = data.select_examples(&evenly_spaced(&va, spec.eval_windows));
        if !train.has_both_classes() {
            return Err(Error::Usage("probe training split lacks a class".into()));
        }
        Ok(Self { train, val, spec, seed })
    }

    /// Reward of the uninformed predictor: uniform probabilities, class-0 ties.
    pub fn baseline(&self) -> f64 {
        match self.spec.mode {
            RewardMode::NegValidationLoss => -std::f64::consts::LN_2,
            RewardMode::ValidationAccuracy => self.val.class_counts()[0] as f64 / self.val.len() as f64,
        }
    }

    fn positions(&self, bands: &[BandAction]) -> Result<Vec<usize>> {
        bands
            .iter()
            .map(|b| {
                self.train
                    .channel_ids
                    .iter()
                    .position(|&c| c == b.index())
                    .ok_or_else(|| Error::Usage(format!("band {} not present in the data", b.label())))
            })
            .collect()
    }
}

impl BandScorer for ProbeScorer {
    fn score(&mut self, bands: &[BandAction]) -> Result<f64> {
        if bands.is_empty() {
            return Ok(self.baseline());
        }
        let mut sorted = bands.to_vec();
        sorted.sort();
        let pos = self.positions(&sorted)?;
        let train = self.train.select_channels(&pos)?;
        let val = self.val.select_channels(&pos)?;
        let mut model = TcnModel::<f32>::new(self.spec.probe_config(pos.len()), self.seed)?;
        let tc = TrainConfig {
            epochs: self.spec.probe_epochs,
            batch_size: self.spec.probe_batch_size,
            learning_rate: self.spec.probe_learning_rate,
            seed: self.seed,
            ..Default::default()
        };
        tcn::train(&mut model, &train, None, &tc)?;
        model.set_mode(Mode::Eval);
        probe_reward(&model, &val, self.spec.mode)
    }
}

/// Reward of one band subset: a probe trained on the subject-level train
/// split of `data`, scored on the rest. Deterministic in `seed`.
pub fn episode_reward(bands: &[BandAction], data: &PatternTensor, spec: &RewardSpec, seed: u64) -> Result<f64> {
    if bands.is_empty() {
        return Err(Error::Usage("select at least one band".into()));
    }
    ProbeScorer::new(data, spec.clone(), seed)?.score(bands)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandSearchConfig {
    pub episodes: usize,
    pub max_bands: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_decay: f64,
    pub epsilon_floor: f64,
    pub reward: RewardSpec,
    /// Window length of the patterns a probe sees (the RL state).
    pub state_window_s: f64,
}

impl Default for BandSearchConfig {
    fn default() -> Self {
        Self {
            episodes: 60,
            max_bands: 6,
            alpha: QTable::DEFAULT_ALPHA,
            gamma: QTable::DEFAULT_GAMMA,
            epsilon_start: 1.0,
            epsilon_decay: 0.995,
            epsilon_floor: 0.05,
            reward: RewardSpec::default(),
            state_window_s: 5.0,
        }
    }
}

impl BandSearchConfig {
    pub fn table(&self, n_actions: usize) -> Result<QTable> {
        QTable::new(self.alpha, self.gamma, self.epsilon_start, self.max_bands, n_actions)
    }
}

/// One line of the search log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub epsilon: f64,
    pub bands: Vec<String>,
    pub reward: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub table: QTable,
    pub best_bands: Vec<BandAction>,
    pub log: Vec<EpisodeRecord>,
}

/// Runs `episodes` epsilon-greedy episodes against `scorer`. Step rewards
/// are score differences, so an episode's total equals the final subset's
/// score minus the baseline. Scores are memoised per subset. After every
/// episode epsilon is multiplied by `decay` and clamped at `floor`.
pub fn search_with_scorer<S: BandScorer>(
    scorer: &mut S,
    mut table: QTable,
    episodes: usize,
    decay: f64,
    floor: f64,
    seed: u64,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<SearchOutcome> {
    if episodes == 0 {
        return Err(Error::config("episodes", "must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut memo: BTreeMap<u32, f64> = BTreeMap::new();
    let mut score_of = |s: BandState, scorer: &mut S| -> Result<f64> {
        if let Some(&v) = memo.get(&s.selected) {
            return Ok(v);
        }
        let v = scorer.score(&s.bands())?;
        memo.insert(s.selected, v);
        Ok(v)
    };
    let mut log = Vec::with_capacity(episodes);
    for episode in 1..=episodes {
        let start = Instant::now();
        let mut s = BandState::empty();
        let mut prev = score_of(s, scorer)?;
        let base = prev;
        while !table.is_terminal(s) {
            let a = table.select_action(s, &mut rng)?;
            let next = s.with(a)?;
            let now = score_of(next, scorer)?;
            table.q_update(s, a, now - prev, next)?;
            prev = now;
            s = next;
        }
        let rec = EpisodeRecord {
            episode,
            epsilon: table.epsilon,
            bands: s.bands().iter().map(|b| b.label()).collect(),
            reward: prev - base,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        if let Some(w) = log_sink.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        log.push(rec);
        table.epsilon = (table.epsilon * decay).max(floor);
    }
    let mut best_bands = table.greedy_rollout();
    best_bands.sort();
    Ok(SearchOutcome {
        table,
        best_bands,
        log,
    })
}

/// Band search over the channels of `data` with probe-classifier rewards.
pub fn run_band_search(
    data: &PatternTensor,
    cfg: &BandSearchConfig,
    seed: u64,
    log_sink: Option<&mut dyn Write>,
) -> Result<SearchOutcome> {
    if !(1..=NUM_CHANNELS).contains(&cfg.max_bands) {
        return Err(Error::config("max_bands", format!("must lie in 1..={NUM_CHANNELS}")));
    }
    let n_actions = data.channel_ids.iter().max().map_or(0, |&m| m + 1);
    if n_actions != data.n_channels() || data.channel_ids.iter().enumerate().any(|(i, &c)| i != c) {
        return Err(Error::Usage("band search expects the full hyper-bank channel set in order".into()));
    }
    let table = cfg.table(n_actions)?;
    let mut scorer = ProbeScorer::new(data, cfg.reward.clone(), seed)?;
    search_with_scorer(
        &mut scorer,
        table,
        cfg.episodes,
        cfg.epsilon_decay,
        cfg.epsilon_floor,
        seed,
        log_sink,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act(i: usize) -> BandAction {
        BandAction::from_index(i).unwrap()
    }

    #[test]
    fn action_indexing() {
        assert_eq!(BandAction::new(Layer::LowPassSweep, 1).unwrap().index(), 0);
        assert_eq!(BandAction::new(Layer::HighPassSweep, 11).unwrap().index(), 21);
        for i in 0..22 {
            assert_eq!(act(i).index(), i);
        }
        assert!(BandAction::new(Layer::LowPassSweep, 0).is_err());
        assert!(BandAction::new(Layer::HighPassSweep, 12).is_err());
        assert!(act(0) < act(11));
        assert_eq!(act(13).label(), "HP3");
    }

    #[test]
    fn single_update_from_zero() {
        let mut t = QTable::new(0.5, 0.9, 0.0, 3, 22).unwrap();
        let s = BandState::empty();
        let n = s.with(act(4)).unwrap();
        t.q_update(s, act(4), 1.0, n).unwrap();
        assert_eq!(t.get(s, act(4)), 0.5);
        t.q_update(s, act(5), 0.0, s.with(act(5)).unwrap()).unwrap();
        assert_eq!(t.get(s, act(5)), 0.0);
    }

    #[test]
    fn illegal_action_is_usage_error() {
        let mut t = QTable::with_defaults(3).unwrap();
        let s = BandState::empty().with(act(2)).unwrap();
        assert!(matches!(
            t.q_update(s, act(2), 1.0, s),
            Err(Error::Usage(_))
        ));
        assert!(s.with(act(2)).is_err());
    }

    #[test]
    fn terminal_successor_has_no_future_value() {
        let mut t = QTable::new(1.0, 0.9, 0.0, 1, 22).unwrap();
        let s = BandState::empty();
        let n = s.with(act(0)).unwrap();
        t.set(n, act(1), 100.0);
        t.q_update(s, act(0), 1.0, n).unwrap();
        assert_eq!(t.get(s, act(0)), 1.0);
    }

    #[test]
    fn two_step_chain_converges_to_discounted_reward() {
        // s0 -a0-> s1 -a1-> terminal with reward 1
        let mut t = QTable::new(0.5, 0.9, 0.0, 2, 2).unwrap();
        let s0 = BandState::empty();
        let s1 = s0.with(act(0)).unwrap();
        let s2 = s1.with(act(1)).unwrap();
        for _ in 0..500 {
            t.q_update(s1, act(1), 1.0, s2).unwrap();
            t.q_update(s0, act(0), 0.0, s1).unwrap();
        }
        assert!((t.get(s0, act(0)) - 0.9).abs() < 1e-6);
    }

    #[test]
    fn greedy_and_tie_break() {
        let mut t = QTable::new(0.1, 0.9, 0.0, 3, 22).unwrap();
        let s = BandState::empty();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(t.select_action(s, &mut rng).unwrap(), act(0));
        t.set(s, act(7), 2.0);
        for _ in 0..20 {
            assert_eq!(t.select_action(s, &mut rng).unwrap(), act(7));
        }
    }

    #[test]
    fn exploration_is_uniform_over_legal_actions() {
        let mut t = QTable::new(0.1, 0.9, 1.0, 22, 22).unwrap();
        t.set(BandState::empty(), act(0), 5.0);
        let mut s = BandState::empty();
        for i in 0..17 {
            s = s.with(act(i)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mut counts = [0usize; 22];
        for _ in 0..n {
            counts[t.select_action(s, &mut rng).unwrap().index()] += 1;
        }
        let sd = (n as f64 * 0.2 * 0.8).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            if i < 17 {
                assert_eq!(c, 0);
            } else {
                assert!((c as f64 - 0.2 * n as f64).abs() < 3.0 * sd, "{i}: {c}");
            }
        }
    }

    #[test]
    fn no_legal_action_is_usage_error() {
        let t = QTable::new(0.1, 0.9, 0.5, 1, 22).unwrap();
        let s = BandState::empty().with(act(3)).unwrap();
        assert!(matches!(
            t.select_action(s, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Usage(_))
        ));
    }

    fn additive(weights: &'static [f64]) -> impl FnMut(&[BandAction]) -> Result<f64> {
        move |bands: &[BandAction]| Ok(bands.iter().map(|b| weights[b.index()]).sum())
    }

    #[test]
    fn toy_search_finds_top_two() {
        let t = QTable::new(0.1, 0.9, 1.0, 2, 3).unwrap();
        let out = search_with_scorer(&mut additive(&[0.5, 0.3, 0.1]), t, 200, 0.995, 0.05, 7, None).unwrap();
        assert_eq!(out.best_bands, vec![act(0), act(1)]);
        assert_eq!(out.log.len(), 200);
        assert!(out.log.iter().all(|r| r.bands.len() == 2 && r.bands[0] != r.bands[1]));
    }

    #[test]
    fn all_bands_when_max_is_everything() {
        let t = QTable::new(0.1, 0.9, 1.0, 22, 22).unwrap();
        let w: &'static [f64] = Box::leak(vec![0.0; 22].into_boxed_slice());
        let out = search_with_scorer(&mut additive(w), t, 2, 0.995, 0.05, 3, None).unwrap();
        assert_eq!(out.best_bands.len(), 22);
    }

    #[test]
    fn epsilon_never_below_floor() {
        let t = QTable::new(0.1, 0.9, 0.06, 1, 3).unwrap();
        let out = search_with_scorer(&mut additive(&[0.5, 0.3, 0.1]), t, 50, 0.5, 0.05, 1, None).unwrap();
        assert!(out.log.iter().all(|r| r.epsilon >= 0.05));
        assert_eq!(out.table.epsilon, 0.05);
    }

    #[test]
    fn log_lines_are_json() {
        let t = QTable::new(0.1, 0.9, 1.0, 2, 3).unwrap();
        let mut buf = Vec::new();
        search_with_scorer(&mut additive(&[0.5, 0.3, 0.1]), t, 5, 0.995, 0.05, 7, Some(&mut buf)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        for line in text.lines() {
            let rec: EpisodeRecord = serde_json::from_str(line).unwrap();
            assert_eq!(rec.bands.len(), 2);
        }
    }

    #[test]
    fn table_json_lists_entries() {
        let mut t = QTable::with_defaults(2).unwrap();
        t.set(BandState::empty(), act(12), 0.25);
        let v: serde_json::Value = serde_json::from_str(&t.to_json().unwrap()).unwrap();
        assert_eq!(v["entries"][0]["action"], "HP2");
        assert_eq!(v["entries"][0]["q"], 0.25);
    }
}
