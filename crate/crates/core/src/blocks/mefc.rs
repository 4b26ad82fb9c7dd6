//! Mixture-of-experts feature compensator.

use alloc::format;
use alloc::vec::Vec;

use super::conv;
use crate::autodiff::Backend;
use crate::error::{arg_err, shape_err, Result};
use crate::init::Initializer;
use crate::ops::ConvGeometry;
use crate::params::ParamId;
use crate::real::Real;

/// The shape-preserving operators an expert can apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpertKind {
    /// 3×3 zero-padded mean, no parameters.
    AvgPool,
    /// Depthwise `k×k` then pointwise.
    Separable(usize),
    /// Depthwise 3×3 with the given dilation, then pointwise.
    Dilated(usize),
}

/// Expert bank in order; an `O`-expert compensator uses the first `O`.
pub const EXPERT_KINDS: [ExpertKind; 8] = [
    ExpertKind::AvgPool,
    ExpertKind::Separable(1),
    ExpertKind::Separable(3),
    ExpertKind::Separable(5),
    ExpertKind::Separable(7),
    ExpertKind::Dilated(1),
    ExpertKind::Dilated(2),
    ExpertKind::Dilated(3),
];

#[derive(Clone, Debug)]
pub struct Expert {
    pub kind: ExpertKind,
    /// `(depthwise, pointwise)` weights; `None` for pooling.
    pub weights: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
pub struct MefcParams {
    pub experts: Vec<Expert>,
    /// `[T, C]` gate hidden layer.
    pub w1: ParamId,
    /// `[O, T]` gate output layer.
    pub w2: ParamId,
    pub fuse: ParamId,
    pub fuse_bias: ParamId,
    pub channels: usize,
}

impl MefcParams {
    pub fn build<T: Real>(
        init: &mut Initializer<'_, T>,
        prefix: &str,
        channels: usize,
        experts: usize,
        hidden: usize,
    ) -> Result<Self> {
        if experts == 0 || experts > EXPERT_KINDS.len() {
            return Err(arg_err(
                "mefc",
                format!(
                    "{experts} experts requested, 1..={} available",
                    EXPERT_KINDS.len()
                ),
            ));
        }
        if hidden == 0 {
            return Err(arg_err("mefc", "gate hidden width must be positive"));
        }
        let c = channels;
        let list = EXPERT_KINDS[..experts]
            .iter()
            .enumerate()
            .map(|(i, &kind)| {
                let k = match kind {
                    ExpertKind::AvgPool => {
                        return Expert { kind, weights: None };
                    }
                    ExpertKind::Separable(k) => k,
                    ExpertKind::Dilated(_) => 3,
                };
                let dw = init.weight(format!("{prefix}.expert{i}.depthwise"), [c, 1, k, k]);
                let pw = init.weight(format!("{prefix}.expert{i}.pointwise"), [c, c, 1, 1]);
                Expert {
                    kind,
                    weights: Some((dw, pw)),
                }
            })
            .collect();
        Ok(Self {
            experts: list,
            w1: init.weight(format!("{prefix}.gate.w1"), [hidden, c]),
            w2: init.weight(format!("{prefix}.gate.w2"), [experts, hidden]),
            fuse: init.weight(format!("{prefix}.fuse.weight"), [c, c, 1, 1]),
            fuse_bias: init.zeros(format!("{prefix}.fuse.bias"), [c]),
            channels,
        })
    }
}

fn apply_expert<T: Real, B: Backend<T>>(b: &mut B, x: &B::Var, e: &Expert, c: usize) -> Result<B::Var> {
    let geometry = match e.kind {
        ExpertKind::AvgPool => return b.avg_pool2d(x, 3, 1, 1),
        ExpertKind::Separable(k) => ConvGeometry::same(k, 1, c),
        ExpertKind::Dilated(d) => ConvGeometry::same(3, d, c),
    };
    let (dw, pw) = e
        .weights
        .ok_or_else(|| arg_err("mefc", "convolutional expert without weights"))?;
    let y = conv(b, x, dw, None, geometry)?;
    conv(b, &y, pw, None, ConvGeometry::pointwise())
}

/// `x + fuse(Σ_i t_i E_i(x))` with gate `t = W2 · ReLU(W1 · mean_hw(x))`.
pub fn mefc_forward<T: Real, B: Backend<T>>(b: &mut B, x: &B::Var, p: &MefcParams) -> Result<B::Var> {
    let shape = b.shape(x).to_vec();
    if shape.len() != 3 || shape[0] != p.channels {
        return Err(shape_err(
            "mefc",
            format!("input {shape:?} for a {}-channel block", p.channels),
        ));
    }
    let c = p.channels;
    let z = b.global_avg_channels(x)?;
    let z = b.reshape(&z, &[c, 1])?;
    let w1 = b.param(p.w1);
    let w2 = b.param(p.w2);
    let hidden = b.matmul(&w1, &z, false)?;
    let hidden = b.relu(&hidden);
    let gate = b.matmul(&w2, &hidden, false)?;
    let o = b.shape(&gate)[0];
    if o != p.experts.len() {
        return Err(shape_err(
            "mefc",
            format!("gate yields {o} weights for {} experts", p.experts.len()),
        ));
    }
    let gate = b.reshape(&gate, &[o])?;
    let outs = p
        .experts
        .iter()
        .map(|e| apply_expert(b, x, e, c))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&B::Var> = outs.iter().collect();
    let mixed = b.weighted_sum(&refs, &gate)?;
    let fused = conv(b, &mixed, p.fuse, Some(p.fuse_bias), ConvGeometry::pointwise())?;
    b.add(&fused, x)
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

    fn run(s: &ParamStore<f64>, p: &MefcParams, x: &Tensor<f64>) -> Tensor<f64> {
        let mut b = Eval::new(s);
        let xv = b.constant(x.clone());
        mefc_forward(&mut b, &xv, p).unwrap().into_owned()
    }

    #[test]
    fn zero_gate_is_identity() {
        let mut s = ParamStore::<f64>::new();
        let p = MefcParams::build(&mut Initializer::new(&mut s, 0), "m", 4, 8, 6).unwrap();
        let x = random(&[4, 5, 5], 1, 1.0);
        let y = run(&s, &p, &x);
        assert_eq!(y.shape(), x.shape());
        *s.get_mut(p.w2) = Tensor::zeros([8, 6]);
        assert_eq!(run(&s, &p, &x).data(), x.data());
    }

    #[test]
    fn one_hot_gate_on_pooling() {
        let mut s = ParamStore::<f64>::new();
        let p = MefcParams::build(&mut Initializer::new(&mut s, 0), "m", 3, 8, 2).unwrap();
        // Positive inputs give a positive descriptor; W1 = 1 keeps both hidden
        // units at Σz, and W2 routes (Σz)·(1/Σz · 1/2) per unit.
        let x = Tensor::from_fn([3, 4, 4], |i| 0.1 + (i % 5) as f64 * 0.2);
        let zsum: f64 = ops::global_avg_channels(&x).unwrap().data().iter().sum();
        *s.get_mut(p.w1) = Tensor::ones([2, 3]);
        let mut w2 = Tensor::zeros([8, 2]);
        w2.data_mut()[0] = 0.5 / zsum;
        w2.data_mut()[1] = 0.5 / zsum;
        *s.get_mut(p.w2) = w2;
        let pooled = ops::avg_pool2d(&x, 3, 1, 1).unwrap();
        let fuse = s.get(p.fuse).clone();
        let expect = ops::add(
            &ops::conv2d(&pooled, &fuse, None, ConvGeometry::pointwise()).unwrap(),
            &x,
        )
        .unwrap();
        assert!(run(&s, &p, &x).max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn fewer_experts_take_the_prefix() {
        let mut s = ParamStore::<f32>::new();
        let p = MefcParams::build(&mut Initializer::new(&mut s, 0), "m", 4, 3, 2).unwrap();
        let kinds: Vec<_> = p.experts.iter().map(|e| e.kind).collect();
        assert_eq!(kinds, EXPERT_KINDS[..3]);
        assert!(MefcParams::build(&mut Initializer::new(&mut s, 0), "n", 4, 9, 2).is_err());
    }

    #[test]
    fn gate_expert_mismatch_is_rejected() {
        let mut s = ParamStore::<f64>::new();
        let mut p = MefcParams::build(&mut Initializer::new(&mut s, 0), "m", 2, 4, 2).unwrap();
        p.experts.pop();
        let mut b = Eval::new(&s);
        let x = b.constant(Tensor::ones([2, 3, 3]));
        assert!(mefc_forward(&mut b, &x, &p).is_err());
    }

    struct Loss<'p>(&'p MefcParams);
    impl Objective for Loss<'_> {
        fn eval<B: Backend<f64>>(&self, b: &mut B, x: &B::Var) -> Result<B::Var> {
            let y = mefc_forward(b, x, self.0)?;
            let t = b.constant(random(&[3, 5, 5], 19, 1.0));
            b.l1_loss(&y, &t)
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut s = ParamStore::<f64>::new();
        let p = MefcParams::build(&mut Initializer::new(&mut s, 1), "m", 3, 8, 4).unwrap();
        randomize(&mut s, 7, 0.6);
        let x = random(&[3, 5, 5], 8, 1.0);
        let r = check_params(&Loss(&p), &s, &x, STEP, Coverage::All).unwrap();
        assert!(r.max_rel_error() < 1e-4, "{r:?}");
    }
}
