//! Layer normalization across the channel extent of a `[C, H, W]` tensor.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Epsilon used by every layer norm in the network.
pub const LAYER_NORM_EPS: f64 = 1e-6;

pub(crate) struct LayerNormForward<T> {
    pub out: Tensor<T>,
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

fn check<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize)> {
    let (c, h, w) = x.dims3("layer_norm")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(
            "layer_norm",
            format!(
                "gamma/beta must be [{c}], got {:?} / {:?}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok((c, h * w))
}

pub(crate) fn layer_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<LayerNormForward<T>> {
    let (c, hw) = check(x, gamma, beta)?;
    let xd = x.data();
    let inv_c = T::ONE / T::from_usize(c);
    let mut mean = vec![T::ZERO; hw];
    for ch in 0..c {
        for (m, &v) in mean.iter_mut().zip(&xd[ch * hw..(ch + 1) * hw]) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m *= inv_c;
    }
    let mut var = vec![T::ZERO; hw];
    for ch in 0..c {
        for ((s, &v), &m) in var.iter_mut().zip(&xd[ch * hw..(ch + 1) * hw]).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    let rstd: Vec<T> = var.iter().map(|&s| T::ONE / (s * inv_c + eps).sqrt()).collect();
    let mut out = vec![T::ZERO; c * hw];
    for ch in 0..c {
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        let src = &xd[ch * hw..(ch + 1) * hw];
        let dst = &mut out[ch * hw..(ch + 1) * hw];
        for p in 0..hw {
            dst[p] = (src[p] - mean[p]) * rstd[p] * g + b;
        }
    }
    Ok(LayerNormForward {
        out: Tensor::new(x.shape().to_vec(), out)?,
        mean,
        rstd,
    })
}

/// Normalizes over channels at every spatial position, then applies the
/// per-channel affine `gamma`, `beta`.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    layer_norm_forward(x, gamma, beta, eps).map(|f| f.out)
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn layer_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    rstd: &[T],
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = x.shape()[0];
    let hw = mean.len();
    let xd = x.data();
    let gd = grad.data();
    let inv_c = T::ONE / T::from_usize(c);
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    // per-position sums of dxhat and dxhat * xhat
    let mut s1 = vec![T::ZERO; hw];
    let mut s2 = vec![T::ZERO; hw];
    for ch in 0..c {
        let g = gamma.data()[ch];
        for p in 0..hw {
            let dy = gd[ch * hw + p];
            let xhat = (xd[ch * hw + p] - mean[p]) * rstd[p];
            dgamma[ch] += dy * xhat;
            dbeta[ch] += dy;
            let dxhat = dy * g;
            s1[p] += dxhat;
            s2[p] += dxhat * xhat;
        }
    }
    let mut dx = vec![T::ZERO; c * hw];
    for ch in 0..c {
        let g = gamma.data()[ch];
        for p in 0..hw {
            let xhat = (xd[ch * hw + p] - mean[p]) * rstd[p];
            let dxhat = gd[ch * hw + p] * g;
            dx[ch * hw + p] = rstd[p] * (dxhat - inv_c * s1[p] - xhat * inv_c * s2[p]);
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("same shape"),
        Tensor::new([c], dgamma).expect("vector"),
        Tensor::new([c], dbeta).expect("vector"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_affine(c: usize) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::ones([c]), Tensor::zeros([c]))
    }

    #[test]
    fn constant_channels_normalize_to_zero() {
        let x = Tensor::full([4, 2, 3], 3.25f64);
        let (g, b) = unit_affine(4);
        let y = layer_norm(&x, &g, &b, LAYER_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_channel_pair() {
        let x = Tensor::new([2, 1, 1], vec![1.0f64, -1.0]).unwrap();
        let (g, b) = unit_affine(2);
        let y = layer_norm(&x, &g, &b, LAYER_NORM_EPS).unwrap();
        let s = 1.0 / (1.0f64 + LAYER_NORM_EPS).sqrt();
        assert!((y.data()[0] - s).abs() < 1e-15);
        assert!((y.data()[1] + s).abs() < 1e-15);
    }

    #[test]
    fn random_input_has_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::from_fn([16, 3, 5], |_| rng.random_range(-4.0..4.0f64));
        let (g, b) = unit_affine(16);
        let y = layer_norm(&x, &g, &b, LAYER_NORM_EPS).unwrap();
        for p in 0..15 {
            let vals: Vec<f64> = (0..16).map(|c| y.data()[c * 15 + p]).collect();
            let mean = vals.iter().sum::<f64>() / 16.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }
}
