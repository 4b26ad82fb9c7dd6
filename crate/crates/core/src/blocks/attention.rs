//! Top-k sparse channel attention.

use alloc::format;
use alloc::vec::Vec;

use super::conv;
use crate::autodiff::Backend;
use crate::error::{arg_err, shape_err, Result};
use crate::init::Initializer;
use crate::ops::{kept_count, ConvGeometry};
use crate::params::ParamId;
use crate::real::Real;

/// Weights of one attention layer on `channels` features.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    /// `[3C, C, 1, 1]` producing stacked Q, K, V.
    pub qkv: ParamId,
    /// `[3C, 1, 3, 3]` depthwise over the stacked channels.
    pub qkv_dw: ParamId,
    /// `[C, C, 1, 1]` output projection.
    pub project: ParamId,
    /// One mixing logit per candidate ratio.
    pub ratio_logits: ParamId,
    pub channels: usize,
    pub heads: usize,
    pub ratios: Vec<f64>,
}

impl AttentionParams {
    pub fn build<T: Real>(
        init: &mut Initializer<'_, T>,
        prefix: &str,
        channels: usize,
        heads: usize,
        ratios: &[f64],
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(arg_err(
                "attention",
                format!("{channels} channels not divisible into {heads} heads"),
            ));
        }
        if ratios.is_empty() {
            return Err(arg_err("attention", "empty ratio set"));
        }
        if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(arg_err("attention", format!("ratio {r} outside (0, 1]")));
        }
        let c = channels;
        Ok(Self {
            qkv: init.weight(format!("{prefix}.qkv"), [3 * c, c, 1, 1]),
            qkv_dw: init.weight(format!("{prefix}.qkv_dw"), [3 * c, 1, 3, 3]),
            project: init.weight(format!("{prefix}.project"), [c, c, 1, 1]),
            ratio_logits: init.zeros(format!("{prefix}.ratio_logits"), [ratios.len()]),
            channels,
            heads,
            ratios: ratios.to_vec(),
        })
    }

    /// Channels per head.
    pub fn head_channels(&self) -> usize {
        self.channels / self.heads
    }

    /// Kept entries per attention row for each candidate ratio.
    pub fn kept(&self) -> Vec<usize> {
        let ch = self.head_channels();
        self.ratios.iter().map(|&r| kept_count(r, ch)).collect()
    }
}

/// `λ = √Ĉ` for per-head channel count `Ĉ`.
pub fn temperature(head_channels: usize) -> f64 {
    libm::sqrt(head_channels as f64)
}

fn scores<T: Real, B: Backend<T>>(b: &mut B, q: &B::Var, k: &B::Var, v: &B::Var) -> Result<B::Var> {
    let (qs, ks, vs) = (b.shape(q).to_vec(), b.shape(k), b.shape(v));
    if qs.len() != 3 || qs != ks || qs != vs {
        return Err(shape_err(
            "channel_attention",
            format!("q, k, v must share an [h, C, HW] shape, got {qs:?} {ks:?} {vs:?}"),
        ));
    }
    let s = b.matmul(q, k, true)?;
    Ok(b.scale(&s, T::from_f64(1.0 / temperature(qs[1]))))
}

/// `softmax(Q Kᵀ / λ) · V` per head, with `Q, K, V: [h, Ĉ, HW]`.
pub fn dense_channel_attention<T: Real, B: Backend<T>>(
    b: &mut B,
    q: &B::Var,
    k: &B::Var,
    v: &B::Var,
) -> Result<B::Var> {
    let s = scores(b, q, k, v)?;
    let a = b.softmax_rows(&s)?;
    b.matmul(&a, v, false)
}

/// Mixture over `kept` of top-k masked attention, weighted by
/// `softmax(ratio_logits)`.
///
/// The attention maps are mixed before the single product with `V`, which is
/// the same convex combination of branch outputs at a quarter of the cost.
pub fn sparse_attention<T: Real, B: Backend<T>>(
    b: &mut B,
    q: &B::Var,
    k: &B::Var,
    v: &B::Var,
    ratio_logits: &B::Var,
    kept: &[usize],
) -> Result<B::Var> {
    let s = scores(b, q, k, v)?;
    let a = b.top_k_mixture(&s, ratio_logits, kept)?;
    b.matmul(&a, v, false)
}

/// Projections, per-head sparse attention and output projection on `[C, H, W]`.
/// No residual is added here.
pub fn tksa_forward<T: Real, B: Backend<T>>(b: &mut B, x: &B::Var, p: &AttentionParams) -> Result<B::Var> {
    let shape = b.shape(x).to_vec();
    let [c, h, w] = shape[..] else {
        return Err(shape_err("tksa", format!("expected [C, H, W], got {shape:?}")));
    };
    if c != p.channels {
        return Err(shape_err(
            "tksa",
            format!("{c} channels, layer has {}", p.channels),
        ));
    }
    let qkv = conv(b, x, p.qkv, None, ConvGeometry::pointwise())?;
    let qkv = conv(b, &qkv, p.qkv_dw, None, ConvGeometry::same(3, 1, 3 * c))?;
    let head = [p.heads, p.head_channels(), h * w];
    let mut parts = Vec::with_capacity(3);
    for i in 0..3 {
        let t = b.slice_channels(&qkv, i * c, c)?;
        parts.push(b.reshape(&t, &head)?);
    }
    let logits = b.param(p.ratio_logits);
    let out = sparse_attention(b, &parts[0], &parts[1], &parts[2], &logits, &p.kept())?;
    let out = b.reshape(&out, &[c, h, w])?;
    conv(b, &out, p.project, None, ConvGeometry::pointwise())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eval;
    use crate::blocks::testing::{random, randomize};
    use crate::gradcheck::{check_params, Coverage, Objective, STEP};
    use crate::ops;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn eval_dense(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
        let store = ParamStore::new();
        let mut b = Eval::new(&store);
        let (q, k, v) = (
            b.constant(q.clone()),
            b.constant(k.clone()),
            b.constant(v.clone()),
        );
        dense_channel_attention(&mut b, &q, &k, &v).unwrap().into_owned()
    }

    #[test]
    fn single_channel_passes_values_through() {
        let v = random(&[2, 1, 6], 1, 1.0);
        let out = eval_dense(&random(&[2, 1, 6], 2, 1.0), &random(&[2, 1, 6], 3, 1.0), &v);
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn zero_queries_average_values() {
        let z = Tensor::zeros([1, 3, 4]);
        let v = random(&[1, 3, 4], 4, 1.0);
        let out = eval_dense(&z, &z, &v);
        for j in 0..4 {
            let mean = (0..3).map(|c| v.data()[c * 4 + j]).sum::<f64>() / 3.0;
            for c in 0..3 {
                assert!((out.data()[c * 4 + j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_matches_stepwise_oracle() {
        let (q, k, v) = (
            random(&[2, 3, 5], 5, 1.0),
            random(&[2, 3, 5], 6, 1.0),
            random(&[2, 3, 5], 7, 1.0),
        );
        let s = ops::scale(&ops::matmul_bt(&q, &k).unwrap(), 1.0 / libm::sqrt(3.0));
        let expect = ops::matmul(&ops::softmax_rows(&s).unwrap(), &v).unwrap();
        assert!(eval_dense(&q, &k, &v).max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn one_hot_mixture_equals_single_branch() {
        let (q, k, v) = (
            random(&[1, 4, 6], 8, 1.0),
            random(&[1, 4, 6], 9, 1.0),
            random(&[1, 4, 6], 10, 1.0),
        );
        let store = ParamStore::new();
        let mut b = Eval::new(&store);
        let (q, k, v) = (b.constant(q), b.constant(k), b.constant(v));
        let logits = b.constant(Tensor::new([2], alloc::vec![0.0, -1e9]).unwrap());
        let mixed = sparse_attention(&mut b, &q, &k, &v, &logits, &[2, 4]).unwrap();
        let single = b.constant(Tensor::zeros([1]));
        let one = sparse_attention(&mut b, &q, &k, &v, &single, &[2]).unwrap();
        assert_eq!(mixed.data(), one.data());
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut s = ParamStore::<f32>::new();
        let mut init = Initializer::new(&mut s, 0);
        assert!(AttentionParams::build(&mut init, "a", 6, 4, &[0.5]).is_err());
        assert!(AttentionParams::build(&mut init, "a", 8, 2, &[]).is_err());
    }

    #[test]
    fn preserves_shape() {
        let mut s = ParamStore::<f32>::new();
        let p = AttentionParams::build(&mut Initializer::new(&mut s, 0), "a", 8, 2, &[0.5, 0.75]).unwrap();
        let mut b = Eval::new(&s);
        let x = b.constant(Tensor::from_fn([8, 16, 16], |i| (i % 7) as f32 * 0.1));
        assert_eq!(tksa_forward(&mut b, &x, &p).unwrap().shape(), &[8, 16, 16]);
    }

    struct Loss<'p>(&'p AttentionParams);
    impl Objective for Loss<'_> {
        fn eval<B: Backend<f64>>(&self, b: &mut B, x: &B::Var) -> Result<B::Var> {
            let y = tksa_forward(b, x, self.0)?;
            let t = b.constant(random(&[4, 3, 3], 77, 1.0));
            b.l1_loss(&y, &t)
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut s = ParamStore::<f64>::new();
        let ratios = [0.5, 0.75, 1.0];
        let p = AttentionParams::build(&mut Initializer::new(&mut s, 1), "a", 4, 1, &ratios).unwrap();
        randomize(&mut s, 2, 0.8);
        let x = random(&[4, 3, 3], 3, 1.0);
        let r = check_params(&Loss(&p), &s, &x, STEP, Coverage::All).unwrap();
        assert!(r.max_rel_error() < 1e-4, "{r:?}");
    }
}
