use rayon::prelude::*;

use super::{axpy, dot, sum, Real, Tensor3};
use crate::error::{Error, Result};

/// Shape of one causal convolution applied to a `batch x c_in x len` input.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub dilation: usize,
    pub len: usize,
}

impl ConvShape {
    #[inline]
    fn shift(&self, j: usize) -> usize {
        (self.k - 1 - j) * self.dilation
    }
}

fn forward_one<T: Real>(s: ConvShape, x: &[T], w: &[T], bias: Option<&[T]>, y: &mut [T]) {
    let l = s.len;
    for o in 0..s.c_out {
        let yo = &mut y[o * l..(o + 1) * l];
        yo.fill(bias.map_or(T::zero(), |b| b[o]));
        for c in 0..s.c_in {
            let xc = &x[c * l..(c + 1) * l];
            let wk = &w[(o * s.c_in + c) * s.k..(o * s.c_in + c + 1) * s.k];
            for (j, &wj) in wk.iter().enumerate() {
                let shift = s.shift(j);
                if shift < l {
                    axpy(wj, &xc[..l - shift], &mut yo[shift..]);
                }
            }
        }
    }
}

/// Batch forward, parallel over examples. `x` is `batch x c_in x len`.
pub(crate) fn forward_batch<T: Real>(s: ConvShape, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let batch = x.len() / (s.c_in * s.len);
    let mut y = vec![T::zero(); batch * s.c_out * s.len];
    y.par_chunks_mut(s.c_out * s.len)
        .zip(x.par_chunks(s.c_in * s.len))
        .for_each(|(yb, xb)| forward_one(s, xb, w, bias, yb));
    y
}

fn backward_one<T: Real>(s: ConvShape, x: &[T], w: &[T], dy: &[T], dx: Option<&mut [T]>, dw: &mut [T], db: &mut [T]) {
    let l = s.len;
    let mut dx = dx;
    if let Some(d) = dx.as_deref_mut() {
        d.fill(T::zero());
    }
    for o in 0..s.c_out {
        let dyo = &dy[o * l..(o + 1) * l];
        db[o] = sum(dyo);
        for c in 0..s.c_in {
            let xc = &x[c * l..(c + 1) * l];
            let base = (o * s.c_in + c) * s.k;
            for j in 0..s.k {
                let shift = s.shift(j);
                if shift >= l {
                    dw[base + j] = T::zero();
                    continue;
                }
                dw[base + j] = dot(&dyo[shift..], &xc[..l - shift]);
                if let Some(d) = dx.as_deref_mut() {
                    axpy(w[base + j], &dyo[shift..], &mut d[c * l..c * l + l - shift]);
                }
            }
        }
    }
}

/// Batch backward. Per-example weight gradients are computed in parallel and
/// then summed in example order, so the result does not depend on scheduling.
pub(crate) fn backward_batch<T: Real>(
    s: ConvShape,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let in_stride = s.c_in * s.len;
    let out_stride = s.c_out * s.len;
    let batch = x.len() / in_stride;
    let n_w = s.c_out * s.c_in * s.k;
    let mut dx = if need_dx { vec![T::zero(); x.len()] } else { Vec::new() };
    let partials: Vec<(Vec<T>, Vec<T>)> = if need_dx {
        dx.par_chunks_mut(in_stride)
            .enumerate()
            .map(|(b, dxb)| {
                let mut dw = vec![T::zero(); n_w];
                let mut db = vec![T::zero(); s.c_out];
                let xb = &x[b * in_stride..(b + 1) * in_stride];
                let dyb = &dy[b * out_stride..(b + 1) * out_stride];
                backward_one(s, xb, w, dyb, Some(dxb), &mut dw, &mut db);
                (dw, db)
            })
            .collect()
    } else {
        (0..batch)
            .into_par_iter()
            .map(|b| {
                let mut dw = vec![T::zero(); n_w];
                let mut db = vec![T::zero(); s.c_out];
                let xb = &x[b * in_stride..(b + 1) * in_stride];
                let dyb = &dy[b * out_stride..(b + 1) * out_stride];
                backward_one(s, xb, w, dyb, None, &mut dw, &mut db);
                (dw, db)
            })
            .collect()
    };
    let mut dw = vec![T::zero(); n_w];
    let mut db = vec![T::zero(); s.c_out];
    for (pw, pb) in &partials {
        for (a, &v) in dw.iter_mut().zip(pw) {
            *a += v;
        }
        for (a, &v) in db.iter_mut().zip(pb) {
            *a += v;
        }
    }
    (need_dx.then_some(dx), dw, db)
}

fn check_shapes<T: Real>(x: &Tensor3<T>, w: &Tensor3<T>, bias_len: usize, dilation: usize) -> Result<ConvShape> {
    let [_, c_in, len] = x.dims;
    let [c_out, w_in, k] = w.dims;
    if w_in != c_in {
        return Err(Error::Usage(format!("weights expect {w_in} input channels, input has {c_in}")));
    }
    if bias_len != c_out {
        return Err(Error::Usage(format!("bias has {bias_len} entries for {c_out} output channels")));
    }
    if dilation == 0 || k == 0 {
        return Err(Error::Usage("dilation and kernel size must be >= 1".into()));
    }
    Ok(ConvShape {
        c_in,
        c_out,
        k,
        dilation,
        len,
    })
}

/// `y[b,o,t] = bias[o] + sum_{c,j} w[o,c,j] * x[b,c,t - (k-1-j)*d]`, with
/// negative time indices reading zero. `w` has shape `c_out x c_in x k`.
pub fn conv1d_dilated_causal_forward<T: Real>(
    x: &Tensor3<T>,
    w: &Tensor3<T>,
    bias: &[T],
    dilation: usize,
) -> Result<Tensor3<T>> {
    let s = check_shapes(x, w, bias.len(), dilation)?;
    let y = forward_batch(s, &x.data, &w.data, Some(bias));
    Tensor3::new(y, [x.dims[0], s.c_out, s.len])
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub dx: Tensor3<T>,
    pub dw: Tensor3<T>,
    pub db: Vec<T>,
}

/// Gradients of `sum(dy * y)` with respect to input, weights and bias.
pub fn conv1d_dilated_causal_backward<T: Real>(
    x: &Tensor3<T>,
    w: &Tensor3<T>,
    dilation: usize,
    dy: &Tensor3<T>,
) -> Result<ConvGrads<T>> {
    let s = check_shapes(x, w, w.dims[0], dilation)?;
    if dy.dims != [x.dims[0], s.c_out, s.len] {
        return Err(Error::Usage(format!("upstream gradient has shape {:?}", dy.dims)));
    }
    let (dx, dw, db) = backward_batch(s, &x.data, &w.data, &dy.data, true);
    Ok(ConvGrads {
        dx: Tensor3::new(dx.expect("requested"), x.dims)?,
        dw: Tensor3::new(dw, w.dims)?,
        db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor3<f64> {
        let n = dims.iter().product();
        Tensor3::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), dims).unwrap()
    }

    #[test]
    fn identity_kernel_copies_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random([2, 3, 17], &mut rng);
        let mut w = Tensor3::zeros([3, 3, 1]);
        for o in 0..3 {
            w.data[o * 3 + o] = 1.0;
        }
        let y = conv1d_dilated_causal_forward(&x, &w, &[0.0; 3], 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn impulse_hits_dilated_taps() {
        let mut x = Tensor3::zeros([1, 1, 30]);
        x.data[5] = 1.0;
        let w = Tensor3::new(vec![1.0; 3], [1, 1, 3]).unwrap();
        let y = conv1d_dilated_causal_forward(&x, &w, &[0.0], 4).unwrap();
        let nz: Vec<usize> = (0..30).filter(|&t| y.data[t] != 0.0).collect();
        assert_eq!(nz, vec![5, 9, 13]);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (b, c, o, l, k, d) = (2, 3, 4, 50, 3, 2);
        let x = random([b, c, l], &mut rng);
        let w = random([o, c, k], &mut rng);
        let bias: Vec<f64> = (0..o).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = conv1d_dilated_causal_forward(&x, &w, &bias, d).unwrap();
        for bi in 0..b {
            for oi in 0..o {
                for t in 0..l {
                    let mut acc = bias[oi];
                    for ci in 0..c {
                        for j in 0..k {
                            let back = (k - 1 - j) * d;
                            if t >= back {
                                acc += w.at(oi, ci, j) * x.at(bi, ci, t - back);
                            }
                        }
                    }
                    assert!((y.at(bi, oi, t) - acc).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random([2, 2, 12], &mut rng);
        let w = random([3, 2, 3], &mut rng);
        let bias = vec![0.1, -0.2, 0.3];
        let dy = random([2, 3, 12], &mut rng);
        let g = conv1d_dilated_causal_backward(&x, &w, 3, &dy).unwrap();
        let objective = |x: &Tensor3<f64>, w: &Tensor3<f64>, b: &[f64]| {
            let y = conv1d_dilated_causal_forward(x, w, b, 3).unwrap();
            y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for i in 0..w.data.len() {
            let (mut p, mut m) = (w.clone(), w.clone());
            p.data[i] += h;
            m.data[i] -= h;
            let fd = (objective(&x, &p, &bias) - objective(&x, &m, &bias)) / (2.0 * h);
            assert!((fd - g.dw.data[i]).abs() < 1e-7);
        }
        for i in 0..x.data.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data[i] += h;
            m.data[i] -= h;
            let fd = (objective(&p, &w, &bias) - objective(&m, &w, &bias)) / (2.0 * h);
            assert!((fd - g.dx.data[i]).abs() < 1e-7);
        }
        for o in 0..3 {
            let expected: f64 = (0..2).flat_map(|b| (0..12).map(move |t| (b, t))).map(|(b, t)| dy.at(b, o, t)).sum();
            assert!((g.db[o] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn future_inputs_get_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random([1, 2, 40], &mut rng);
        let w = random([2, 2, 3], &mut rng);
        for t in [0, 7, 21, 39] {
            let mut dy = Tensor3::zeros([1, 2, 40]);
            dy.data[t] = 1.0;
            dy.data[40 + t] = 1.0;
            let g = conv1d_dilated_causal_backward(&x, &w, 5, &dy).unwrap();
            for c in 0..2 {
                for tp in t + 1..40 {
                    assert_eq!(g.dx.at(0, c, tp), 0.0);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let x = Tensor3::<f32>::zeros([1, 2, 8]);
        let w = Tensor3::<f32>::zeros([3, 4, 3]);
        assert!(matches!(conv1d_dilated_causal_forward(&x, &w, &[0.0; 3], 1), Err(Error::Usage(_))));
        let w = Tensor3::<f32>::zeros([3, 2, 3]);
        assert!(conv1d_dilated_causal_forward(&x, &w, &[0.0; 2], 1).is_err());
        assert!(conv1d_dilated_causal_forward(&x, &w, &[0.0; 3], 0).is_err());
    }
}
