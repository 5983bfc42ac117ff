use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::block::{block_backward, block_forward, sample_mask, BlockCache, BlockGrads, BnMoments, ResidualBlockParams};
use super::{real, Mode, Readout, Real, TcnConfig, Tensor3};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TcnModel<T> {
    pub config: TcnConfig,
    pub blocks: Vec<ResidualBlockParams<T>>,
    /// `num_classes x channels_per_block`
    pub head_weights: Vec<T>,
    pub head_bias: Vec<T>,
    mode: Mode,
}

/// Per-block spatial dropout masks (`batch x channels`), entries 0 or
/// `1/(1 - rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks<T> {
    pub blocks: Vec<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub blocks: Vec<BlockGrads<T>>,
    pub head_weights: Vec<T>,
    pub head_bias: Vec<T>,
}

impl<T: Real> Gradients<T> {
    /// Same order as [`TcnModel::trainable`].
    pub fn groups(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for b in &self.blocks {
            out.extend([&b.conv_weights[..], &b.conv_bias, &b.bn_gamma, &b.bn_beta]);
            if let Some(d) = &b.downsample_weights {
                out.push(d);
            }
        }
        out.push(&self.head_weights);
        out.push(&self.head_bias);
        out
    }
}

/// Batch-norm moments of one train-mode batch, for the running averages.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
    /// Values per channel (`batch * len`).
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct BackwardOutput<T> {
    pub loss: f64,
    pub probs: Vec<Vec<T>>,
    pub grads: Gradients<T>,
    pub batch_stats: BatchStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub labels: Vec<usize>,
    pub probs: Vec<Vec<T>>,
}

struct Pass<T> {
    caches: Vec<BlockCache<T>>,
    moments: Vec<BnMoments>,
    logits: Vec<Vec<T>>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_tie_low<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let e: Vec<f64> = logits
        .iter()
        .map(|&z| (z - m).to_f64().unwrap_or(f64::NAN).exp())
        .collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| real(v / s)).collect()
}

fn cross_entropy<T: Real>(logits: &[T], label: usize) -> f64 {
    let z: Vec<f64> = logits.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[label]
}

impl<T: Real> TcnModel<T> {
    /// He-uniform conv weights, zero bias and beta, unit gamma. Starts in
    /// Eval mode.
    pub fn new(config: TcnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels_per_block;
        let blocks = (0..config.num_blocks)
            .map(|i| {
                let c_in = if i == 0 { config.in_channels } else { c };
                ResidualBlockParams::init(c_in, c, config.kernel_size, &mut rng)
            })
            .collect();
        let bound = (6.0 / c as f64).sqrt();
        let head_weights = (0..config.num_classes * c)
            .map(|_| real(rng.gen_range(-bound..bound)))
            .collect();
        let head_bias = vec![T::zero(); config.num_classes];
        Ok(Self {
            config,
            blocks,
            head_weights,
            head_bias,
            mode: Mode::Eval,
        })
    }

    pub fn from_parts(
        config: TcnConfig,
        blocks: Vec<ResidualBlockParams<T>>,
        head_weights: Vec<T>,
        head_bias: Vec<T>,
    ) -> Result<Self> {
        let m = Self {
            config,
            blocks,
            head_weights,
            head_bias,
            mode: Mode::Eval,
        };
        m.validate()?;
        Ok(m)
    }

    /// Shapes agree with the config and every parameter is finite.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate().map_err(|e| Error::Mismatch(e.to_string()))?;
        if self.blocks.len() != cfg.num_blocks {
            return Err(Error::Mismatch(format!(
                "{} blocks, config says {}",
                self.blocks.len(),
                cfg.num_blocks
            )));
        }
        let c = cfg.channels_per_block;
        for (i, b) in self.blocks.iter().enumerate() {
            let c_in = if i == 0 { cfg.in_channels } else { c };
            if b.c_in != c_in || b.c_out != c || b.kernel_size != cfg.kernel_size {
                return Err(Error::Mismatch(format!("block {i} shape disagrees with config")));
            }
            b.validate().map_err(|e| Error::Mismatch(format!("block {i}: {e}")))?;
        }
        if self.head_weights.len() != cfg.num_classes * c || self.head_bias.len() != cfg.num_classes {
            return Err(Error::Mismatch("classifier head shape disagrees with config".into()));
        }
        if self.head_weights.iter().chain(&self.head_bias).any(|v| !v.is_finite()) {
            return Err(Error::Mismatch("non-finite head parameter".into()));
        }
        Ok(())
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn zero_head(&mut self) {
        self.head_weights.fill(T::zero());
        self.head_bias.fill(T::zero());
    }

    pub fn trainable(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for b in &self.blocks {
            out.extend([&b.conv_weights[..], &b.conv_bias, &b.bn_gamma, &b.bn_beta]);
            if let Some(d) = &b.downsample_weights {
                out.push(d);
            }
        }
        out.push(&self.head_weights);
        out.push(&self.head_bias);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.conv_weights);
            out.push(&mut b.conv_bias);
            out.push(&mut b.bn_gamma);
            out.push(&mut b.bn_beta);
            if let Some(d) = &mut b.downsample_weights {
                out.push(d);
            }
        }
        out.push(&mut self.head_weights);
        out.push(&mut self.head_bias);
        out
    }

    /// Names matching [`Self::trainable`], e.g. `block1.conv_weights`.
    pub fn group_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for n in ["conv_weights", "conv_bias", "bn_gamma", "bn_beta"] {
                out.push(format!("block{i}.{n}"));
            }
            if b.downsample_weights.is_some() {
                out.push(format!("block{i}.downsample_weights"));
            }
        }
        out.push("head_weights".into());
        out.push("head_bias".into());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|g| g.len()).sum()
    }

    pub fn sample_dropout_masks<R: Rng>(&self, batch: usize, rng: &mut R) -> DropoutMasks<T> {
        DropoutMasks {
            blocks: self
                .blocks
                .iter()
                .map(|b| sample_mask(batch, b.c_out, self.config.dropout_rate, rng))
                .collect(),
        }
    }

    fn check_input(&self, x: &Tensor3<T>) -> Result<()> {
        let [b, c, l] = x.dims;
        if c != self.config.in_channels {
            return Err(Error::Usage(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if b == 0 || l == 0 {
            return Err(Error::Usage("empty input".into()));
        }
        if x.data.len() != b * c * l {
            return Err(Error::Usage("input data does not match its dims".into()));
        }
        if x.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Usage("input contains non-finite values".into()));
        }
        Ok(())
    }

    fn check_masks(&self, masks: &DropoutMasks<T>, batch: usize) -> Result<()> {
        let ok = masks.blocks.len() == self.blocks.len()
            && masks.blocks.iter().zip(&self.blocks).all(|(m, b)| m.len() == batch * b.c_out);
        if ok {
            Ok(())
        } else {
            Err(Error::Usage("dropout masks do not match batch and model".into()))
        }
    }

    /// Features at time `t` (or the time mean) from the final block output.
    fn features(&self, y: &[T], batch: usize, len: usize, at: Option<usize>) -> Vec<Vec<T>> {
        let c = self.config.channels_per_block;
        (0..batch)
            .map(|b| {
                (0..c)
                    .map(|ch| {
                        let row = &y[(b * c + ch) * len..(b * c + ch + 1) * len];
                        match (at, self.config.readout) {
                            (Some(t), _) => row[t],
                            (None, Readout::Last) => row[len - 1],
                            (None, Readout::Mean) => super::sum(row) / real(len as f64),
                        }
                    })
                    .collect()
            })
            .collect()
    }

    fn head(&self, feats: &[Vec<T>]) -> Vec<Vec<T>> {
        let c = self.config.channels_per_block;
        feats
            .iter()
            .map(|f| {
                (0..self.config.num_classes)
                    .map(|k| self.head_bias[k] + super::dot(&self.head_weights[k * c..(k + 1) * c], f))
                    .collect()
            })
            .collect()
    }

    fn run(&self, x: &Tensor3<T>, mode: Mode, masks: Option<&DropoutMasks<T>>, at: Option<usize>) -> Pass<T> {
        let len = x.dims[2];
        let mut caches: Vec<BlockCache<T>> = Vec::with_capacity(self.blocks.len());
        let mut moments = Vec::new();
        for (i, (p, &d)) in self.blocks.iter().zip(&self.config.dilation_schedule).enumerate() {
            let input: &[T] = if i == 0 { &x.data } else { &caches[i - 1].y };
            let mask = masks.map(|m| &m.blocks[i][..]);
            let (cache, mom) = block_forward(p, input, len, d, mode, mask);
            caches.push(cache);
            moments.extend(mom);
        }
        let feats = self.features(&caches.last().expect("at least one block").y, x.dims[0], len, at);
        let logits = self.head(&feats);
        Pass {
            caches,
            moments,
            logits,
        }
    }

    /// Back-propagates `dlogits` (taken at time `at`, or per the readout).
    fn backprop(
        &self,
        x: &Tensor3<T>,
        pass: &Pass<T>,
        mode: Mode,
        dlogits: &[Vec<T>],
        at: Option<usize>,
        need_dx: bool,
    ) -> (Gradients<T>, Option<Vec<T>>) {
        let [batch, _, len] = x.dims;
        let c = self.config.channels_per_block;
        let k = self.config.num_classes;
        let last_y = &pass.caches.last().expect("at least one block").y;
        let feats = self.features(last_y, batch, len, at);

        let mut head_weights = vec![T::zero(); k * c];
        let mut head_bias = vec![T::zero(); k];
        let mut dy = vec![T::zero(); last_y.len()];
        for b in 0..batch {
            for cls in 0..k {
                let g = dlogits[b][cls];
                head_bias[cls] += g;
                super::axpy(g, &feats[b], &mut head_weights[cls * c..(cls + 1) * c]);
            }
            for ch in 0..c {
                let mut df = T::zero();
                for cls in 0..k {
                    df += self.head_weights[cls * c + ch] * dlogits[b][cls];
                }
                let row = &mut dy[(b * c + ch) * len..(b * c + ch + 1) * len];
                match (at, self.config.readout) {
                    (Some(t), _) => row[t] = df,
                    (None, Readout::Last) => row[len - 1] = df,
                    (None, Readout::Mean) => {
                        let v = df / real(len as f64);
                        row.fill(v);
                    }
                }
            }
        }

        let mut block_grads = Vec::with_capacity(self.blocks.len());
        let mut dx_out = None;
        for i in (0..self.blocks.len()).rev() {
            let input: &[T] = if i == 0 { &x.data } else { &pass.caches[i - 1].y };
            let want_dx = i > 0 || need_dx;
            let (g, dx) = block_backward(
                &self.blocks[i],
                input,
                &pass.caches[i],
                len,
                self.config.dilation_schedule[i],
                mode,
                &dy,
                want_dx,
            );
            block_grads.push(g);
            if i > 0 {
                dy = dx.expect("requested");
            } else {
                dx_out = dx;
            }
        }
        block_grads.reverse();
        (
            Gradients {
                blocks: block_grads,
                head_weights,
                head_bias,
            },
            dx_out,
        )
    }

    /// Class probabilities. Train mode uses batch statistics without
    /// dropout; Eval mode uses running statistics.
    pub fn forward(&self, x: &Tensor3<T>) -> Result<Vec<Vec<T>>> {
        self.check_input(x)?;
        let pass = self.run(x, self.mode, None, None);
        Ok(pass.logits.iter().map(|z| softmax(z)).collect())
    }

    pub fn logits(&self, x: &Tensor3<T>) -> Result<Vec<Vec<T>>> {
        self.check_input(x)?;
        Ok(self.run(x, self.mode, None, None).logits)
    }

    /// Train-mode mean cross-entropy under fixed dropout masks.
    pub fn loss_with_masks(&self, x: &Tensor3<T>, labels: &[usize], masks: &DropoutMasks<T>) -> Result<f64> {
        self.check_train_call(x, labels, masks)?;
        let pass = self.run(x, Mode::Train, Some(masks), None);
        Ok(pass
            .logits
            .iter()
            .zip(labels)
            .map(|(z, &l)| cross_entropy(z, l))
            .sum::<f64>()
            / labels.len() as f64)
    }

    fn check_train_call(&self, x: &Tensor3<T>, labels: &[usize], masks: &DropoutMasks<T>) -> Result<()> {
        if self.mode != Mode::Train {
            return Err(Error::Usage("backward requires Train mode".into()));
        }
        self.check_input(x)?;
        self.check_masks(masks, x.dims[0])?;
        if labels.len() != x.dims[0] {
            return Err(Error::Usage(format!("{} labels for batch of {}", labels.len(), x.dims[0])));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= self.config.num_classes) {
            return Err(Error::Usage(format!("label {l} out of range")));
        }
        Ok(())
    }

    /// Loss and exact parameter gradients of the mean cross-entropy, with
    /// batch-norm statistics of this batch and the given dropout masks.
    pub fn backward(&self, x: &Tensor3<T>, labels: &[usize], masks: &DropoutMasks<T>) -> Result<BackwardOutput<T>> {
        self.check_train_call(x, labels, masks)?;
        let batch = x.dims[0];
        let pass = self.run(x, Mode::Train, Some(masks), None);
        let probs: Vec<Vec<T>> = pass.logits.iter().map(|z| softmax(z)).collect();
        let loss = pass
            .logits
            .iter()
            .zip(labels)
            .map(|(z, &l)| cross_entropy(z, l))
            .sum::<f64>()
            / batch as f64;
        let inv_b = real::<T>(1.0 / batch as f64);
        let dlogits: Vec<Vec<T>> = probs
            .iter()
            .zip(labels)
            .map(|(p, &l)| {
                p.iter()
                    .enumerate()
                    .map(|(k, &pk)| (pk - if k == l { T::one() } else { T::zero() }) * inv_b)
                    .collect()
            })
            .collect();
        let (grads, _) = self.backprop(x, &pass, Mode::Train, &dlogits, None, false);
        Ok(BackwardOutput {
            loss,
            probs,
            grads,
            batch_stats: BatchStats {
                mean: pass.moments.iter().map(|m| m.mean.clone()).collect(),
                var: pass.moments.iter().map(|m| m.var.clone()).collect(),
                count: batch * x.dims[2],
            },
        })
    }

    /// Which post-sum ReLU units pass their input, for every block in
    /// order. Finite-difference checks use this to spot perturbations that
    /// cross a kink.
    pub fn relu_gates(&self, x: &Tensor3<T>, masks: Option<&DropoutMasks<T>>) -> Result<Vec<bool>> {
        self.check_input(x)?;
        if let Some(m) = masks {
            self.check_masks(m, x.dims[0])?;
        }
        let pass = self.run(x, self.mode, masks, None);
        Ok(pass
            .caches
            .iter()
            .flat_map(|c| c.y.iter().map(|&v| v > T::zero()))
            .collect())
    }

    /// Folds one batch's moments into the running statistics
    /// (`running = (1 - momentum) * running + momentum * batch`, unbiased
    /// variance).
    pub fn update_running_stats(&mut self, stats: &BatchStats, momentum: f64) {
        let n = stats.count as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for ch in 0..b.c_out {
                let rm = b.bn_running_mean[ch].to_f64().unwrap_or(f64::NAN);
                let rv = b.bn_running_var[ch].to_f64().unwrap_or(f64::NAN);
                b.bn_running_mean[ch] = real((1.0 - momentum) * rm + momentum * stats.mean[i][ch]);
                b.bn_running_var[ch] = real((1.0 - momentum) * rv + momentum * stats.var[i][ch] * unbias);
            }
        }
    }

    /// Gradient of logit `class` at output time `t` with respect to the
    /// input of one example. Eval mode only, so examples and time steps do
    /// not interact through batch statistics.
    pub fn input_gradient(&self, x: &Tensor3<T>, t: usize, class: usize) -> Result<Tensor3<T>> {
        if self.mode != Mode::Eval {
            return Err(Error::Usage("input_gradient requires Eval mode".into()));
        }
        self.check_input(x)?;
        if t >= x.dims[2] || class >= self.config.num_classes {
            return Err(Error::Usage("time step or class out of range".into()));
        }
        let pass = self.run(x, Mode::Eval, None, Some(t));
        let dlogits: Vec<Vec<T>> = (0..x.dims[0])
            .map(|_| {
                (0..self.config.num_classes)
                    .map(|k| if k == class { T::one() } else { T::zero() })
                    .collect()
            })
            .collect();
        let (_, dx) = self.backprop(x, &pass, Mode::Eval, &dlogits, Some(t), true);
        Tensor3::new(dx.expect("requested"), x.dims)
    }

    /// Arg-max class per example (ties to class 0). Eval mode only.
    pub fn predict(&self, x: &Tensor3<T>) -> Result<Prediction<T>> {
        if self.mode != Mode::Eval {
            return Err(Error::Usage("predict requires Eval mode".into()));
        }
        let probs = self.forward(x)?;
        Ok(Prediction {
            labels: probs.iter().map(|p| argmax_tie_low(p)).collect(),
            probs,
        })
    }
}
