use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{backward_batch, forward_batch, ConvShape};
use super::{real, Mode, Real, Tensor3, BN_EPS};
use crate::error::{Error, Result};

/// Conv -> batch norm -> spatial dropout, plus a shortcut, then ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlockParams<T> {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel_size: usize,
    /// `c_out x c_in x kernel_size`
    pub conv_weights: Vec<T>,
    pub conv_bias: Vec<T>,
    pub bn_gamma: Vec<T>,
    pub bn_beta: Vec<T>,
    pub bn_running_mean: Vec<T>,
    pub bn_running_var: Vec<T>,
    /// 1x1 projection (`c_out x c_in`), present iff `c_in != c_out`.
    pub downsample_weights: Option<Vec<T>>,
}

fn he_uniform<T: Real, R: Rng>(n: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| real(rng.gen_range(-bound..bound))).collect()
}

impl<T: Real> ResidualBlockParams<T> {
    pub fn init<R: Rng>(c_in: usize, c_out: usize, kernel_size: usize, rng: &mut R) -> Self {
        let conv_weights = he_uniform(c_out * c_in * kernel_size, c_in * kernel_size, rng);
        let downsample_weights = (c_in != c_out).then(|| he_uniform(c_out * c_in, c_in, rng));
        Self {
            c_in,
            c_out,
            kernel_size,
            conv_weights,
            conv_bias: vec![T::zero(); c_out],
            bn_gamma: vec![T::one(); c_out],
            bn_beta: vec![T::zero(); c_out],
            bn_running_mean: vec![T::zero(); c_out],
            bn_running_var: vec![T::one(); c_out],
            downsample_weights,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (ci, co, k) = (self.c_in, self.c_out, self.kernel_size);
        let checks = [
            ("conv_weights", self.conv_weights.len(), co * ci * k),
            ("conv_bias", self.conv_bias.len(), co),
            ("bn_gamma", self.bn_gamma.len(), co),
            ("bn_beta", self.bn_beta.len(), co),
            ("bn_running_mean", self.bn_running_mean.len(), co),
            ("bn_running_var", self.bn_running_var.len(), co),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Mismatch(format!("{name} has {got} values, expected {want}")));
            }
        }
        match (&self.downsample_weights, ci != co) {
            (Some(w), true) if w.len() == co * ci => {}
            (None, false) => {}
            _ => return Err(Error::Mismatch("downsample weights must exist iff c_in != c_out".into())),
        }
        if self.bn_running_var.iter().any(|&v| v < T::zero()) {
            return Err(Error::Mismatch("negative running variance".into()));
        }
        let all = [
            &self.conv_weights,
            &self.conv_bias,
            &self.bn_gamma,
            &self.bn_beta,
            &self.bn_running_mean,
            &self.bn_running_var,
        ];
        if all.iter().any(|v| v.iter().any(|x| !x.is_finite()))
            || self.downsample_weights.iter().flatten().any(|x| !x.is_finite())
        {
            return Err(Error::Mismatch("non-finite parameter".into()));
        }
        Ok(())
    }

    fn conv_shape(&self, dilation: usize, len: usize) -> ConvShape {
        ConvShape {
            c_in: self.c_in,
            c_out: self.c_out,
            k: self.kernel_size,
            dilation,
            len,
        }
    }

    fn shortcut_shape(&self, len: usize) -> ConvShape {
        ConvShape {
            c_in: self.c_in,
            c_out: self.c_out,
            k: 1,
            dilation: 1,
            len,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads<T> {
    pub conv_weights: Vec<T>,
    pub conv_bias: Vec<T>,
    pub bn_gamma: Vec<T>,
    pub bn_beta: Vec<T>,
    pub downsample_weights: Option<Vec<T>>,
}

/// Intermediate values kept for the backward pass.
pub(crate) struct BlockCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    mask: Option<Vec<T>>,
    pub y: Vec<T>,
}

/// Per-channel batch moments (biased variance) from a train-mode pass.
pub(crate) struct BnMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) fn sample_mask<T: Real, R: Rng>(batch: usize, channels: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = real::<T>(1.0 / (1.0 - rate));
    (0..batch * channels)
        .map(|_| if rate > 0.0 && rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

pub(crate) fn block_forward<T: Real>(
    p: &ResidualBlockParams<T>,
    x: &[T],
    len: usize,
    dilation: usize,
    mode: Mode,
    mask: Option<&[T]>,
) -> (BlockCache<T>, Option<BnMoments>) {
    let c = p.c_out;
    let batch = x.len() / (p.c_in * len);
    let mut u = forward_batch(p.conv_shape(dilation, len), x, &p.conv_weights, Some(&p.conv_bias));

    let (mean, inv_std, moments) = match mode {
        Mode::Train => {
            let n = (batch * len) as f64;
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ch in 0..c {
                let rows = (0..batch).map(|b| &u[(b * c + ch) * len..(b * c + ch + 1) * len]);
                let m = rows.clone().map(|r| super::sum(r).to_f64().unwrap_or(f64::NAN)).sum::<f64>() / n;
                let mt = real::<T>(m);
                let ss: f64 = rows
                    .map(|r| {
                        let mut acc = T::zero();
                        for &v in r {
                            acc += (v - mt) * (v - mt);
                        }
                        acc.to_f64().unwrap_or(f64::NAN)
                    })
                    .sum();
                mean[ch] = m;
                var[ch] = ss / n;
            }
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            (mean.clone(), inv, Some(BnMoments { mean, var }))
        }
        Mode::Eval => (
            p.bn_running_mean.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
            p.bn_running_var
                .iter()
                .map(|v| 1.0 / (v.to_f64().unwrap_or(f64::NAN) + BN_EPS).sqrt())
                .collect(),
            None,
        ),
    };
    let inv_std: Vec<T> = inv_std.into_iter().map(real).collect();
    let mean: Vec<T> = mean.into_iter().map(real).collect();

    let shortcut = p
        .downsample_weights
        .as_ref()
        .map(|w| forward_batch(p.shortcut_shape(len), x, w, None));
    let sc: &[T] = shortcut.as_deref().unwrap_or(x);

    // u becomes xhat in place; y is built alongside.
    let mut y = vec![T::zero(); u.len()];
    let mask = if mode == Mode::Train { mask } else { None };
    for b in 0..batch {
        for ch in 0..c {
            let off = (b * c + ch) * len;
            let (m, is, g, be) = (mean[ch], inv_std[ch], p.bn_gamma[ch], p.bn_beta[ch]);
            let keep = mask.map_or(T::one(), |mk| mk[b * c + ch]);
            let xh = &mut u[off..off + len];
            let yo = &mut y[off..off + len];
            let so = &sc[off..off + len];
            for t in 0..len {
                let h = (xh[t] - m) * is;
                xh[t] = h;
                let s = (g * h + be) * keep + so[t];
                yo[t] = if s > T::zero() { s } else { T::zero() };
            }
        }
    }
    (
        BlockCache {
            xhat: u,
            inv_std,
            mask: mask.map(<[T]>::to_vec),
            y,
        },
        moments,
    )
}

/// Backward through one block given the upstream gradient `dy`. Train mode
/// differentiates through the batch statistics; Eval mode treats the
/// running statistics as constants.
pub(crate) fn block_backward<T: Real>(
    p: &ResidualBlockParams<T>,
    x: &[T],
    cache: &BlockCache<T>,
    len: usize,
    dilation: usize,
    mode: Mode,
    dy: &[T],
    need_dx: bool,
) -> (BlockGrads<T>, Option<Vec<T>>) {
    let c = p.c_out;
    let batch = x.len() / (p.c_in * len);
    let n = (batch * len) as f64;

    // ds: gradient at the pre-activation sum (ReLU gate)
    let ds: Vec<T> = dy
        .iter()
        .zip(&cache.y)
        .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
        .collect();

    let mut d_gamma = vec![T::zero(); c];
    let mut d_beta = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sg, mut sb) = (0.0f64, 0.0f64);
        for b in 0..batch {
            let off = (b * c + ch) * len;
            let keep = cache.mask.as_ref().map_or(1.0, |m| m[b * c + ch].to_f64().unwrap_or(f64::NAN));
            let row = &ds[off..off + len];
            sg += keep * super::dot(row, &cache.xhat[off..off + len]).to_f64().unwrap_or(f64::NAN);
            sb += keep * super::sum(row).to_f64().unwrap_or(f64::NAN);
        }
        d_gamma[ch] = real(sg);
        d_beta[ch] = real(sb);
    }

    let mut du = vec![T::zero(); ds.len()];
    for b in 0..batch {
        for ch in 0..c {
            let off = (b * c + ch) * len;
            let keep = cache.mask.as_ref().map_or(T::one(), |m| m[b * c + ch]);
            let scale = p.bn_gamma[ch] * cache.inv_std[ch];
            match mode {
                Mode::Train => {
                    let mb = d_beta[ch] / real(n);
                    let mg = d_gamma[ch] / real(n);
                    for t in 0..len {
                        du[off + t] = scale * (ds[off + t] * keep - mb - cache.xhat[off + t] * mg);
                    }
                }
                Mode::Eval => {
                    for t in 0..len {
                        du[off + t] = scale * ds[off + t] * keep;
                    }
                }
            }
        }
    }

    let (dx_conv, dw, db) = backward_batch(p.conv_shape(dilation, len), x, &p.conv_weights, &du, need_dx);
    let (dx, d_down) = match &p.downsample_weights {
        Some(w) => {
            let (dx_sc, dwd, _) = backward_batch(p.shortcut_shape(len), x, w, &ds, need_dx);
            let dx = dx_conv.zip(dx_sc).map(|(mut a, b)| {
                a.iter_mut().zip(&b).for_each(|(a, &b)| *a += b);
                a
            });
            (dx, Some(dwd))
        }
        None => {
            let dx = dx_conv.map(|mut a| {
                a.iter_mut().zip(&ds).for_each(|(a, &b)| *a += b);
                a
            });
            (dx, None)
        }
    };
    (
        BlockGrads {
            conv_weights: dw,
            conv_bias: db,
            bn_gamma: d_gamma,
            bn_beta: d_beta,
            downsample_weights: d_down,
        },
        dx,
    )
}

/// One residual block on a `batch x c_in x len` tensor. In Train mode batch
/// statistics are used and whole channels are dropped with `dropout_rate`
/// (survivors scaled by `1/(1 - rate)`); Eval mode uses running statistics
/// and never touches `rng`.
pub fn residual_block_forward<T: Real, R: Rng>(
    x: &Tensor3<T>,
    params: &ResidualBlockParams<T>,
    dilation: usize,
    mode: Mode,
    dropout_rate: f64,
    rng: &mut R,
) -> Result<Tensor3<T>> {
    params.validate()?;
    if x.dims[1] != params.c_in {
        return Err(Error::Usage(format!(
            "block expects {} channels, input has {}",
            params.c_in, x.dims[1]
        )));
    }
    if dilation == 0 {
        return Err(Error::Usage("dilation must be >= 1".into()));
    }
    let mask = match mode {
        Mode::Train => Some(sample_mask(x.dims[0], params.c_out, dropout_rate, rng)),
        Mode::Eval => None,
    };
    let (cache, _) = block_forward(params, &x.data, x.dims[2], dilation, mode, mask.as_deref());
    Tensor3::new(cache.y, [x.dims[0], params.c_out, x.dims[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_x(dims: [usize; 3], seed: u64) -> Tensor3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor3::new((0..dims.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect(), dims).unwrap()
    }

    #[test]
    fn eval_ignores_rng() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ResidualBlockParams::<f64>::init(3, 5, 3, &mut rng);
        p.bn_running_mean = vec![0.1, -0.2, 0.0, 0.3, 0.05];
        p.bn_running_var = vec![1.5, 0.5, 2.0, 1.0, 0.7];
        let x = random_x([2, 3, 20], 1);
        let a = residual_block_forward(&x, &p, 2, Mode::Eval, 0.5, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let b = residual_block_forward(&x, &p, 2, Mode::Eval, 0.5, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_weights_give_relu_of_beta_plus_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ResidualBlockParams::<f64>::init(4, 4, 3, &mut rng);
        p.conv_weights.fill(0.0);
        p.bn_beta = vec![0.5, -0.25, 0.0, 1.0];
        let x = random_x([3, 4, 16], 2);
        for mode in [Mode::Train, Mode::Eval] {
            p.bn_running_mean.fill(0.0);
            let y = residual_block_forward(&x, &p, 4, mode, 0.0, &mut rng).unwrap();
            for b in 0..3 {
                for c in 0..4 {
                    for t in 0..16 {
                        let expect = (p.bn_beta[c] + x.at(b, c, t)).max(0.0);
                        assert!((y.at(b, c, t) - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn train_mode_normalises_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ResidualBlockParams::<f64>::init(3, 6, 3, &mut rng);
        let x = random_x([4, 3, 30], 6);
        let (cache, moments) = block_forward(&p, &x.data, 30, 2, Mode::Train, None);
        assert!(moments.is_some());
        for ch in 0..6 {
            let vals: Vec<f64> = (0..4).flat_map(|b| cache.xhat[(b * 6 + ch) * 30..(b * 6 + ch + 1) * 30].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            // var of xhat is var / (var + eps)
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
    }

    #[test]
    fn spatial_dropout_zeroes_whole_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = ResidualBlockParams::<f64>::init(2, 4, 3, &mut rng);
        p.bn_beta = vec![3.0; 4];
        p.conv_weights.fill(0.0);
        let x = Tensor3::zeros([8, 2, 10]);
        let y = residual_block_forward(&x, &p, 1, Mode::Train, 0.5, &mut rng).unwrap();
        let mut dropped = 0;
        for b in 0..8 {
            for c in 0..4 {
                let row: Vec<f64> = (0..10).map(|t| y.at(b, c, t)).collect();
                if row.iter().all(|&v| v == 0.0) {
                    dropped += 1;
                } else {
                    assert!(row.iter().all(|&v| (v - 6.0).abs() < 1e-12));
                }
            }
        }
        assert!(dropped > 0 && dropped < 32);
    }

    #[test]
    fn channel_mismatch_is_usage_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ResidualBlockParams::<f32>::init(3, 4, 3, &mut rng);
        let x = Tensor3::<f32>::zeros([1, 2, 8]);
        assert!(matches!(
            residual_block_forward(&x, &p, 1, Mode::Eval, 0.0, &mut rng),
            Err(Error::Usage(_))
        ));
    }
}
