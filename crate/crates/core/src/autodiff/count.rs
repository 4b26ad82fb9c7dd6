use alloc::format;
use alloc::vec::Vec;
use core::marker::PhantomData;

use super::Backend;
use crate::error::{shape_err, Result};
use crate::ops::ConvGeometry;
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Propagates shapes only and tallies floating point operations.
///
/// Convolutions and matrix products count `2 · multiply-accumulates`; pooling
/// counts one operation per summed element; mixing steps count a
/// multiply-add per element. Normalization and activations are not counted.
pub struct ShapeCounter<'a, T: Real> {
    store: &'a ParamStore<T>,
    flops: u64,
    _marker: PhantomData<T>,
}

impl<'a, T: Real> ShapeCounter<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            flops: 0,
            _marker: PhantomData,
        }
    }

    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn input(&mut self, shape: &[usize]) -> Vec<usize> {
        shape.to_vec()
    }
}

fn dims3(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize)> {
    match *s {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(shape_err(op, format!("expected [C, H, W], got {s:?}"))),
    }
}

impl<'a, T: Real> Backend<T> for ShapeCounter<'a, T> {
    type Var = Vec<usize>;

    fn shape<'s>(&'s self, v: &'s Self::Var) -> &'s [usize] {
        v
    }

    fn param(&mut self, id: ParamId) -> Self::Var {
        self.store.get(id).shape().to_vec()
    }

    fn constant(&mut self, t: Tensor<T>) -> Self::Var {
        t.shape().to_vec()
    }

    fn conv2d(
        &mut self,
        x: &Self::Var,
        weight: &Self::Var,
        _bias: Option<&Self::Var>,
        g: ConvGeometry,
    ) -> Result<Self::Var> {
        let (cin, h, w) = dims3("conv2d", x)?;
        let [cout, cpg, kh, kw] = weight[..] else {
            return Err(shape_err("conv2d", "weight rank"));
        };
        if cin != cpg * g.groups {
            return Err(shape_err(
                "conv2d",
                format!("{cin} channels vs weight {weight:?}"),
            ));
        }
        let ho = (h + 2 * g.padding - g.dilation * (kh - 1) - 1) / g.stride + 1;
        let wo = (w + 2 * g.padding - g.dilation * (kw - 1) - 1) / g.stride + 1;
        self.flops += 2 * (cout * ho * wo * cpg * kh * kw) as u64;
        Ok(alloc::vec![cout, ho, wo])
    }

    fn avg_pool2d(
        &mut self,
        x: &Self::Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self::Var> {
        let (c, h, w) = dims3("avg_pool2d", x)?;
        let ho = (h + 2 * padding - kernel) / stride + 1;
        let wo = (w + 2 * padding - kernel) / stride + 1;
        self.flops += (c * ho * wo * kernel * kernel) as u64;
        Ok(alloc::vec![c, ho, wo])
    }

    fn matmul(&mut self, a: &Self::Var, b: &Self::Var, transpose_b: bool) -> Result<Self::Var> {
        let (ra, rb) = (a.len(), b.len());
        if ra < 2 || rb < 2 || a[..ra - 2] != b[..rb - 2] {
            return Err(shape_err("matmul", format!("{a:?} x {b:?}")));
        }
        let (m, k) = (a[ra - 2], a[ra - 1]);
        let (kb, n) = if transpose_b {
            (b[rb - 1], b[rb - 2])
        } else {
            (b[rb - 2], b[rb - 1])
        };
        if k != kb {
            return Err(shape_err("matmul", format!("{a:?} x {b:?}")));
        }
        let batch: usize = a[..ra - 2].iter().product();
        self.flops += 2 * (batch * m * k * n) as u64;
        let mut out = a[..ra - 2].to_vec();
        out.extend_from_slice(&[m, n]);
        Ok(out)
    }

    fn softmax_rows(&mut self, x: &Self::Var) -> Result<Self::Var> {
        Ok(x.clone())
    }

    fn top_k_mixture(&mut self, scores: &Self::Var, _logits: &Self::Var, ks: &[usize]) -> Result<Self::Var> {
        let n: usize = scores.iter().product();
        self.flops += 2 * (ks.len() * n) as u64;
        Ok(scores.clone())
    }

    fn layer_norm(
        &mut self,
        x: &Self::Var,
        _gamma: &Self::Var,
        _beta: &Self::Var,
        _eps: T,
    ) -> Result<Self::Var> {
        Ok(x.clone())
    }

    fn relu(&mut self, x: &Self::Var) -> Self::Var {
        x.clone()
    }

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        if a != b {
            return Err(shape_err("add", format!("{a:?} vs {b:?}")));
        }
        Ok(a.clone())
    }

    fn scale(&mut self, x: &Self::Var, _s: T) -> Self::Var {
        x.clone()
    }

    fn concat_channels(&mut self, xs: &[&Self::Var]) -> Result<Self::Var> {
        let mut out = xs[0].clone();
        out[0] = xs.iter().map(|s| s[0]).sum();
        Ok(out)
    }

    fn slice_channels(&mut self, x: &Self::Var, _start: usize, len: usize) -> Result<Self::Var> {
        let mut out = x.clone();
        out[0] = len;
        Ok(out)
    }

    fn reshape(&mut self, x: &Self::Var, shape: &[usize]) -> Result<Self::Var> {
        if x.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(shape_err("reshape", format!("{x:?} -> {shape:?}")));
        }
        Ok(shape.to_vec())
    }

    fn global_avg_channels(&mut self, x: &Self::Var) -> Result<Self::Var> {
        Ok(alloc::vec![x[0]])
    }

    fn weighted_sum(&mut self, xs: &[&Self::Var], _weights: &Self::Var) -> Result<Self::Var> {
        let n: usize = xs[0].iter().product();
        self.flops += 2 * (xs.len() * n) as u64;
        Ok(xs[0].clone())
    }

    fn pixel_shuffle(&mut self, x: &Self::Var, f: usize) -> Result<Self::Var> {
        let (c, h, w) = dims3("pixel_shuffle", x)?;
        Ok(alloc::vec![c / (f * f), h * f, w * f])
    }

    fn pixel_unshuffle(&mut self, x: &Self::Var, f: usize) -> Result<Self::Var> {
        let (c, h, w) = dims3("pixel_unshuffle", x)?;
        Ok(alloc::vec![c * f * f, h / f, w / f])
    }

    fn l1_loss(&mut self, _pred: &Self::Var, _target: &Self::Var) -> Result<Self::Var> {
        Ok(Vec::new())
    }

    fn sum(&mut self, _x: &Self::Var) -> Self::Var {
        Vec::new()
    }
}
