use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{argmax_tie_low, Prediction, TcnModel};
use super::{real, Mode, Real, Tensor3};
use crate::error::{Error, Result};
use crate::patterns::PatternTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub grad_clip_norm: Option<f64>,
    /// Weight of the newest batch in the running BN statistics.
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            grad_clip_norm: None,
            bn_momentum: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("adam_beta", "betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps", "must be > 0"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::config("bn_momentum", "must lie in (0, 1]"));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip_norm", "must be > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_acc,val_acc";

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            let val = r.val_acc.map(|v| v.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{}", r.epoch, r.train_loss, r.train_acc, val)?;
        }
        Ok(())
    }
}

/// Examples `idx` of a pattern tensor as a `batch x channels x len` tensor.
pub(crate) fn gather<T: Real>(data: &PatternTensor, idx: &[usize]) -> Tensor3<T> {
    let mut out = Vec::with_capacity(idx.len() * data.n_channels() * data.length());
    for &i in idx {
        out.extend(data.example(i).iter().map(|&v| real::<T>(v as f64)));
    }
    Tensor3 {
        data: out,
        dims: [idx.len(), data.n_channels(), data.length()],
    }
}

const EVAL_CHUNK: usize = 64;

/// Eval-mode predictions for every example, in order.
pub fn predict_tensor<T: Real>(model: &TcnModel<T>, data: &PatternTensor) -> Result<Prediction<T>> {
    let mut labels = Vec::with_capacity(data.len());
    let mut probs = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let p = model.predict(&gather(data, chunk))?;
        labels.extend(p.labels);
        probs.extend(p.probs);
    }
    Ok(Prediction { labels, probs })
}

pub fn evaluate_accuracy<T: Real>(model: &TcnModel<T>, data: &PatternTensor) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("no examples to evaluate".into()));
    }
    let p = predict_tensor(model, data)?;
    let correct = p.labels.iter().zip(&data.labels).filter(|(&a, b)| a == b.index()).count();
    Ok(correct as f64 / data.len() as f64)
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    fn update<T: Real>(&mut self, params: Vec<&mut [T]>, grads: &[&[T]], scale: f64, tc: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (tc.adam_beta1, tc.adam_beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (gi, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[gi], &mut self.v[gi]);
            for j in 0..p.len() {
                let gj = g[j].to_f64().unwrap_or(f64::NAN) * scale;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let step = tc.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + tc.adam_eps);
                p[j] = real(p[j].to_f64().unwrap_or(f64::NAN) - step);
            }
        }
    }
}

/// Mini-batch Adam on `data`. Shuffling and dropout masks come from one
/// stream seeded by `tc.seed`, so runs are reproducible. `val`, when given,
/// is scored in Eval mode after every epoch. The model is left in Eval mode.
pub fn train<T: Real>(
    model: &mut TcnModel<T>,
    data: &PatternTensor,
    val: Option<&PatternTensor>,
    tc: &TrainConfig,
) -> Result<History> {
    train_observed(model, data, val, tc, &mut |_| {})
}

/// [`train`], calling `on_epoch` after every epoch.
pub fn train_observed<T: Real>(
    model: &mut TcnModel<T>,
    data: &PatternTensor,
    val: Option<&PatternTensor>,
    tc: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<History> {
    tc.validate()?;
    if !data.has_both_classes() {
        return Err(Error::Usage("training data must contain both classes".into()));
    }
    if data.n_channels() != model.config.in_channels {
        return Err(Error::Mismatch(format!(
            "data has {} channels, model expects {}",
            data.n_channels(),
            model.config.in_channels
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let sizes: Vec<usize> = model.trainable().iter().map(|g| g.len()).collect();
    let mut adam = Adam::new(&sizes);
    let mut history = History::default();
    let labels: Vec<usize> = data.labels.iter().map(|l| l.index()).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=tc.epochs {
        model.set_mode(Mode::Train);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(tc.batch_size) {
            let x = gather::<T>(data, batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let masks = model.sample_dropout_masks(batch.len(), &mut rng);
            let out = model.backward(&x, &y, &masks)?;
            if !out.loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: format!("loss became {}", out.loss),
                });
            }
            loss_sum += out.loss * batch.len() as f64;
            correct += out.probs.iter().zip(&y).filter(|(p, &l)| argmax_tie_low(p) == l).count();
            model.update_running_stats(&out.batch_stats, tc.bn_momentum);

            let groups = out.grads.groups();
            let scale = match tc.grad_clip_norm {
                Some(max) => {
                    let norm = groups
                        .iter()
                        .flat_map(|g| g.iter())
                        .map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    if norm > max {
                        max / norm
                    } else {
                        1.0
                    }
                }
                None => 1.0,
            };
            adam.update(model.trainable_mut(), &groups, scale, tc);
        }
        let train_loss = loss_sum / data.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                reason: "non-finite epoch loss".into(),
            });
        }
        model.set_mode(Mode::Eval);
        let val_acc = match val {
            Some(v) if !v.is_empty() => Some(evaluate_accuracy(model, v)?),
            _ => None,
        };
        history.records.push(EpochRecord {
            epoch,
            train_loss,
            train_acc: correct as f64 / data.len() as f64,
            val_acc,
        });
        on_epoch(&history.records[epoch - 1]);
    }
    model.set_mode(Mode::Eval);
    Ok(history)
}
