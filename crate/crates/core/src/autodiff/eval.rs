use alloc::borrow::Cow;
use alloc::vec::Vec;

use super::Backend;
use crate::error::Result;
use crate::ops::{self, ConvGeometry};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Immediate evaluation: no graph, parameters borrowed from the store.
pub struct Eval<'a, T: Real> {
    store: &'a ParamStore<T>,
}

impl<'a, T: Real> Eval<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self { store }
    }
}

type V<'a, T> = Cow<'a, Tensor<T>>;

impl<'a, T: Real> Backend<T> for Eval<'a, T> {
    type Var = V<'a, T>;

    fn shape<'s>(&'s self, v: &'s Self::Var) -> &'s [usize] {
        v.shape()
    }

    fn param(&mut self, id: ParamId) -> Self::Var {
        Cow::Borrowed(self.store.get(id))
    }

    fn constant(&mut self, t: Tensor<T>) -> Self::Var {
        Cow::Owned(t)
    }

    fn conv2d(
        &mut self,
        x: &Self::Var,
        weight: &Self::Var,
        bias: Option<&Self::Var>,
        geometry: ConvGeometry,
    ) -> Result<Self::Var> {
        ops::conv2d(x, weight, bias.map(|b| b.as_ref()), geometry).map(Cow::Owned)
    }

    fn avg_pool2d(
        &mut self,
        x: &Self::Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self::Var> {
        ops::avg_pool2d(x, kernel, stride, padding).map(Cow::Owned)
    }

    fn matmul(&mut self, a: &Self::Var, b: &Self::Var, transpose_b: bool) -> Result<Self::Var> {
        ops::matmul_ex(a, b, false, transpose_b).map(Cow::Owned)
    }

    fn softmax_rows(&mut self, x: &Self::Var) -> Result<Self::Var> {
        ops::softmax_rows(x).map(Cow::Owned)
    }

    fn top_k_mixture(&mut self, scores: &Self::Var, logits: &Self::Var, ks: &[usize]) -> Result<Self::Var> {
        ops::top_k_mixture(scores, logits, ks).map(|f| Cow::Owned(f.mixed))
    }

    fn layer_norm(
        &mut self,
        x: &Self::Var,
        gamma: &Self::Var,
        beta: &Self::Var,
        eps: T,
    ) -> Result<Self::Var> {
        ops::layer_norm(x, gamma, beta, eps).map(Cow::Owned)
    }

    fn relu(&mut self, x: &Self::Var) -> Self::Var {
        Cow::Owned(ops::relu(x))
    }

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        ops::add(a, b).map(Cow::Owned)
    }

    fn scale(&mut self, x: &Self::Var, s: T) -> Self::Var {
        Cow::Owned(ops::scale(x, s))
    }

    fn concat_channels(&mut self, xs: &[&Self::Var]) -> Result<Self::Var> {
        let refs: Vec<&Tensor<T>> = xs.iter().map(|v| v.as_ref()).collect();
        ops::concat_channels(&refs).map(Cow::Owned)
    }

    fn slice_channels(&mut self, x: &Self::Var, start: usize, len: usize) -> Result<Self::Var> {
        ops::slice_channels(x, start, len).map(Cow::Owned)
    }

    fn reshape(&mut self, x: &Self::Var, shape: &[usize]) -> Result<Self::Var> {
        x.as_ref().clone().reshape(shape).map(Cow::Owned)
    }

    fn global_avg_channels(&mut self, x: &Self::Var) -> Result<Self::Var> {
        ops::global_avg_channels(x).map(Cow::Owned)
    }

    fn weighted_sum(&mut self, xs: &[&Self::Var], weights: &Self::Var) -> Result<Self::Var> {
        let refs: Vec<&Tensor<T>> = xs.iter().map(|v| v.as_ref()).collect();
        ops::weighted_sum(&refs, weights).map(Cow::Owned)
    }

    fn pixel_shuffle(&mut self, x: &Self::Var, factor: usize) -> Result<Self::Var> {
        ops::pixel_shuffle(x, factor).map(Cow::Owned)
    }

    fn pixel_unshuffle(&mut self, x: &Self::Var, factor: usize) -> Result<Self::Var> {
        ops::pixel_unshuffle(x, factor).map(Cow::Owned)
    }

    fn l1_loss(&mut self, pred: &Self::Var, target: &Self::Var) -> Result<Self::Var> {
        ops::l1_loss(pred, target).map(|v| Cow::Owned(Tensor::scalar(v)))
    }

    fn sum(&mut self, x: &Self::Var) -> Self::Var {
        Cow::Owned(Tensor::scalar(ops::sum(x)))
    }
}
