use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{gemm, MatMut, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

impl<T: Scalar> Tensor<T> {
    /// Affine map over the trailing axis: `x[.., din] * w[din, dout] + b[dout]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Self> {
        let din = *self.shape().last().unwrap();
        let dout = match weight.shape() {
            &[wi, wo] if wi == din => wo,
            s => {
                return Err(Error::dim(format!(
                    "linear: input {:?} against weight {s:?}",
                    self.shape()
                )))
            }
        };
        if let Some(b) = bias {
            if b.shape() != [dout] {
                return Err(Error::dim(format!("linear: bias {:?} for {dout} outputs", b.shape())));
            }
        }
        let rows = self.numel() / din;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = bias {
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(b.data());
            }
        }
        gemm(
            T::one(),
            MatRef::new(self.data(), rows, din),
            MatRef::new(weight.data(), din, dout),
            T::one(),
            MatMut::new(&mut out, rows, dout),
        );
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        let has_bias = bias.is_some();
        Tensor::from_op("linear", out, shape, &inputs, move |ctx| {
            let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let g = MatRef::new(ctx.grad, rows, dout);
            let gx = ctx.inputs[0].requires_grad().then(|| {
                let mut gx = vec![T::zero(); rows * din];
                gemm(T::one(), g, MatRef::new(w, din, dout).t(), T::zero(), MatMut::new(&mut gx, rows, din));
                gx
            });
            let mut gw = vec![T::zero(); din * dout];
            gemm(T::one(), MatRef::new(x, rows, din).t(), g, T::zero(), MatMut::new(&mut gw, din, dout));
            let mut grads = vec![gx, Some(gw)];
            if has_bias {
                let mut gb = vec![T::zero(); dout];
                for row in ctx.grad.chunks(dout) {
                    gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                grads.push(Some(gb));
            }
            grads
        })
    }
}

/// Inverted dropout. Identity when not training or when `p == 0`; otherwise
/// each unit is zeroed with probability `p` and survivors are scaled by
/// `1 / (1 - p)`. The mask is a pure function of `seed`.
pub fn dropout<T: Scalar>(x: &Tensor<T>, p: f64, training: bool, seed: u64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::arg(format!("dropout rate {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.numel())
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    x.mul(&Tensor::from_vec(mask, x.shape())?)
}

pub struct BatchNormOutput<T> {
    pub output: Tensor<T>,
    /// Updated `(running_mean, running_var)` when run in training mode.
    pub running: Option<(Vec<T>, Vec<T>)>,
}

/// Per-channel batch normalization over N, H and W of an NHWC map.
///
/// Training normalizes with the biased batch statistics and returns the
/// updated running statistics `momentum * running + (1 - momentum) * batch`;
/// inference normalizes with the running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    training: bool,
    momentum: f64,
    eps: f64,
) -> Result<BatchNormOutput<T>> {
    let c = *x.shape().last().unwrap();
    if x.rank() != 4 || gamma.shape() != [c] || beta.shape() != [c] || running_mean.len() != c || running_var.len() != c {
        return Err(Error::dim(format!("batch_norm: input {:?} with {} channel params", x.shape(), gamma.numel())));
    }
    let m = x.numel() / c;
    let eps = T::from_f64_lossy(eps);
    let data = x.data();
    let (mean, var) = if training {
        let mut mean = vec![T::zero(); c];
        for row in data.chunks(c) {
            mean.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
        }
        let mf = T::from_usize(m).unwrap();
        mean.iter_mut().for_each(|v| *v /= mf);
        let mut var = vec![T::zero(); c];
        for row in data.chunks(c) {
            for k in 0..c {
                let d = row[k] - mean[k];
                var[k] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= mf);
        (mean, var)
    } else {
        (running_mean.to_vec(), running_var.to_vec())
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let xhat: Vec<T> = data
        .chunks(c)
        .flat_map(|row| (0..c).map(|k| (row[k] - mean[k]) * inv_std[k]).collect::<Vec<_>>())
        .collect();
    let (g, b) = (gamma.data(), beta.data());
    let out: Vec<T> = xhat.iter().enumerate().map(|(i, &v)| v * g[i % c] + b[i % c]).collect();

    let running = training.then(|| {
        let mo = T::from_f64_lossy(momentum);
        let one_m = T::one() - mo;
        let rm = running_mean.iter().zip(&mean).map(|(&r, &bm)| mo * r + one_m * bm).collect();
        let rv = running_var.iter().zip(&var).map(|(&r, &bv)| mo * r + one_m * bv).collect();
        (rm, rv)
    });

    let output = Tensor::from_op("batch_norm", out, x.shape().to_vec(), &[x, gamma, beta], move |ctx| {
        let gamma = ctx.inputs[1].data();
        let gy = ctx.grad;
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for (i, &gv) in gy.iter().enumerate() {
            dgamma[i % c] += gv * xhat[i];
            dbeta[i % c] += gv;
        }
        let mut dx = vec![T::zero(); gy.len()];
        if training {
            // dx = inv_std / m * (m * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
            let mf = T::from_usize(m).unwrap();
            for (i, d) in dx.iter_mut().enumerate() {
                let k = i % c;
                let dxhat = gy[i] * gamma[k];
                let sum_dxhat = dbeta[k] * gamma[k];
                let sum_dxhat_xhat = dgamma[k] * gamma[k];
                *d = inv_std[k] / mf * (mf * dxhat - sum_dxhat - xhat[i] * sum_dxhat_xhat);
            }
        } else {
            for (i, d) in dx.iter_mut().enumerate() {
                let k = i % c;
                *d = gy[i] * gamma[k] * inv_std[k];
            }
        }
        vec![Some(dx), Some(dgamma), Some(dbeta)]
    })?;
    Ok(BatchNormOutput { output, running })
}

/// He-normal initialization, `N(0, 2 / fan_in)`.
pub fn he_normal<T: Scalar>(rng: &mut impl Rng, len: usize, fan_in: usize) -> Vec<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    (0..len).map(|_| T::from_f64_lossy(normal.sample(rng))).collect()
}

/// Glorot-uniform initialization, `U(-l, l)` with `l = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<T: Scalar>(rng: &mut impl Rng, len: usize, fan_in: usize, fan_out: usize) -> Vec<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| T::from_f64_lossy(rng.random_range(-limit..limit))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_and_reduction_width() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let eye = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let zero = Tensor::zeros(&[2]).unwrap();
        assert_eq!(x.linear(&eye, Some(&zero)).unwrap().to_vec(), x.to_vec());

        let z = Tensor::<f32>::zeros(&[1, 256]).unwrap();
        let w = Tensor::zeros(&[256, 64]).unwrap();
        assert_eq!(z.linear(&w, None).unwrap().shape(), &[1, 64]);
        assert!(z.linear(&Tensor::zeros(&[128, 64]).unwrap(), None).is_err());
    }

    #[test]
    fn linear_matches_hand_product() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let w = Tensor::from_vec(vec![1.0, -1.0, 0.5, 2.0, 0.0, 1.0], &[3, 2]).unwrap();
        let b = Tensor::from_vec(vec![0.1, 0.2], &[2]).unwrap();
        let y = x.linear(&w, Some(&b)).unwrap();
        let expect = [1.0 + 1.0 + 0.0 + 0.1, -1.0 + 4.0 + 3.0 + 0.2, 4.0 + 2.5 + 0.1, -4.0 + 10.0 + 6.0 + 0.2];
        for (a, e) in y.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_identity_cases_and_range() {
        let x = Tensor::<f32>::full(1.0, &[100]).unwrap();
        assert_eq!(dropout(&x, 0.0, true, 1).unwrap().to_vec(), x.to_vec());
        assert_eq!(dropout(&x, 0.9, false, 1).unwrap().to_vec(), x.to_vec());
        assert!(dropout(&x, 1.0, true, 1).is_err());
        assert!(dropout(&x, -0.1, true, 1).is_err());
    }

    #[test]
    fn dropout_rate_and_reproducibility() {
        let x = Tensor::<f64>::full(1.0, &[100_000]).unwrap();
        let a = dropout(&x, 0.1, true, 42).unwrap();
        let b = dropout(&x, 0.1, true, 42).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        let dropped = a.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((dropped - 0.1).abs() < 0.01, "dropped fraction {dropped}");
        let kept = a.data().iter().find(|&&v| v != 0.0).unwrap();
        assert!((kept - 1.0 / 0.9).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_training_normalizes() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 10.0, 3.0, 20.0, 5.0, 30.0, 7.0, 40.0], &[1, 2, 2, 2]).unwrap();
        let gamma = Tensor::full(1.0, &[2]).unwrap();
        let beta = Tensor::zeros(&[2]).unwrap();
        let out = batch_norm(&x, &gamma, &beta, &[0.0, 0.0], &[1.0, 1.0], true, 0.9, 1e-5).unwrap();
        let y = out.output.to_vec();
        for k in 0..2 {
            let ch: Vec<f64> = y.iter().skip(k).step_by(2).copied().collect();
            let mean: f64 = ch.iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
        }
        let (rm, _) = out.running.unwrap();
        assert!((rm[0] - 0.1 * 4.0).abs() < 1e-12);
        assert!((rm[1] - 0.1 * 25.0).abs() < 1e-12);
    }
}
