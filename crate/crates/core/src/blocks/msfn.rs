//! Mixed-scale feed-forward network.

use alloc::format;

use super::{conv, norm};
use crate::autodiff::Backend;
use crate::error::{arg_err, shape_err, Result};
use crate::init::Initializer;
use crate::ops::ConvGeometry;
use crate::params::ParamId;
use crate::real::Real;

/// `r · C` rounded to the nearest even integer.
pub fn expanded_channels(channels: usize, ratio: f64) -> usize {
    2 * (libm::round(ratio * channels as f64 / 2.0) as usize).max(1)
}

/// Weights of one feed-forward block, including its leading layer norm.
///
/// With `e` expanded channels the first stage runs 3×3 and 5×5 depthwise
/// convolutions on `e` channels, the second stage on the `2e` cross
/// concatenations, and the reduction maps `4e → C`.
#[derive(Clone, Debug)]
pub struct MsfnParams {
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub expand: ParamId,
    pub dw3_a: ParamId,
    pub dw5_a: ParamId,
    pub dw3_b: ParamId,
    pub dw5_b: ParamId,
    pub reduce: ParamId,
    pub channels: usize,
    pub hidden: usize,
}

impl MsfnParams {
    pub fn build<T: Real>(
        init: &mut Initializer<'_, T>,
        prefix: &str,
        channels: usize,
        ratio: f64,
    ) -> Result<Self> {
        if !(ratio > 1.0) {
            return Err(arg_err("msfn", format!("expansion ratio {ratio} must exceed 1")));
        }
        let (c, e) = (channels, expanded_channels(channels, ratio));
        Ok(Self {
            norm_gamma: init.ones(format!("{prefix}.norm.weight"), [c]),
            norm_beta: init.zeros(format!("{prefix}.norm.bias"), [c]),
            expand: init.weight(format!("{prefix}.expand"), [e, c, 1, 1]),
            dw3_a: init.weight(format!("{prefix}.dw3_a"), [e, 1, 3, 3]),
            dw5_a: init.weight(format!("{prefix}.dw5_a"), [e, 1, 5, 5]),
            dw3_b: init.weight(format!("{prefix}.dw3_b"), [2 * e, 1, 3, 3]),
            dw5_b: init.weight(format!("{prefix}.dw5_b"), [2 * e, 1, 5, 5]),
            reduce: init.weight(format!("{prefix}.reduce"), [c, 4 * e, 1, 1]),
            channels,
            hidden: e,
        })
    }
}

/// `x + reduce([p2, s2])` where `p1, s1` are ReLU'd 3×3 / 5×5 depthwise
/// responses to the expanded, normalized input and
/// `p2 = ReLU(dw3([p1, s1]))`, `s2 = ReLU(dw5([s1, p1]))`.
pub fn msfn_forward<T: Real, B: Backend<T>>(b: &mut B, x: &B::Var, p: &MsfnParams) -> Result<B::Var> {
    let c = b.shape(x).first().copied().unwrap_or(0);
    if c != p.channels || b.shape(x).len() != 3 {
        return Err(shape_err(
            "msfn",
            format!("input {:?} for a {}-channel block", b.shape(x), p.channels),
        ));
    }
    let e = p.hidden;
    let dw = |k, ch| ConvGeometry::same(k, 1, ch);
    let n = norm(b, x, p.norm_gamma, p.norm_beta)?;
    let h = conv(b, &n, p.expand, None, ConvGeometry::pointwise())?;
    let p1 = conv(b, &h, p.dw3_a, None, dw(3, e))?;
    let p1 = b.relu(&p1);
    let s1 = conv(b, &h, p.dw5_a, None, dw(5, e))?;
    let s1 = b.relu(&s1);
    let ps = b.concat_channels(&[&p1, &s1])?;
    let sp = b.concat_channels(&[&s1, &p1])?;
    let p2 = conv(b, &ps, p.dw3_b, None, dw(3, 2 * e))?;
    let p2 = b.relu(&p2);
    let s2 = conv(b, &sp, p.dw5_b, None, dw(5, 2 * e))?;
    let s2 = b.relu(&s2);
    let cat = b.concat_channels(&[&p2, &s2])?;
    let y = conv(b, &cat, p.reduce, None, ConvGeometry::pointwise())?;
    b.add(x, &y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eval;
    use crate::blocks::testing::{random, randomize};
    use crate::gradcheck::{check_params, Coverage, Objective, STEP};
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    #[test]
    fn expansion_rounding() {
        assert_eq!(expanded_channels(48, 2.66), 128);
        assert_eq!(expanded_channels(8, 2.66), 22);
        assert_eq!(expanded_channels(96, 2.66), 256);
        assert_eq!(expanded_channels(4, 2.0), 8);
    }

    #[test]
    fn zero_reduction_is_identity_and_shape_holds() {
        let mut s = ParamStore::<f32>::new();
        let p = MsfnParams::build(&mut Initializer::new(&mut s, 0), "f", 48, 2.66).unwrap();
        assert_eq!(s.get(p.dw3_b).shape(), &[256, 1, 3, 3]);
        let x = Tensor::from_fn([48, 4, 4], |i| (i % 11) as f32 * 0.3 - 1.0);
        let y = {
            let mut b = Eval::new(&s);
            let xv = b.constant(x.clone());
            msfn_forward(&mut b, &xv, &p).unwrap().into_owned()
        };
        assert_eq!(y.shape(), x.shape());
        assert_ne!(y.data(), x.data());
        *s.get_mut(p.reduce) = Tensor::zeros([48, 512, 1, 1]);
        let mut b = Eval::new(&s);
        let xv = b.constant(x.clone());
        assert_eq!(msfn_forward(&mut b, &xv, &p).unwrap().data(), x.data());
    }

    #[test]
    fn rejects_contracting_ratio() {
        let mut s = ParamStore::<f32>::new();
        assert!(MsfnParams::build(&mut Initializer::new(&mut s, 0), "f", 8, 1.0).is_err());
    }

    struct Loss<'p>(&'p MsfnParams);
    impl Objective for Loss<'_> {
        fn eval<B: Backend<f64>>(&self, b: &mut B, x: &B::Var) -> Result<B::Var> {
            let y = msfn_forward(b, x, self.0)?;
            let t = b.constant(random(&[3, 4, 4], 91, 1.0));
            b.l1_loss(&y, &t)
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut s = ParamStore::<f64>::new();
        let p = MsfnParams::build(&mut Initializer::new(&mut s, 1), "f", 3, 1.5).unwrap();
        randomize(&mut s, 5, 0.7);
        let x = random(&[3, 4, 4], 6, 1.0);
        let r = check_params(&Loss(&p), &s, &x, STEP, Coverage::All).unwrap();
        assert!(r.max_rel_error() < 1e-4, "{r:?}");
    }
}
