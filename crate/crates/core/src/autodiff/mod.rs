//! Differentiable evaluation.
//!
//! Model code is written once against [`Backend`]. [`Eval`] runs the kernels
//! directly and keeps nothing around; [`Tape`] records every operation so
//! [`Tape::backward`] can replay them in reverse.

mod eval;
mod tape;

pub use eval::Eval;
pub use tape::{Gradients, Tape, Var};

use crate::error::Result;
use crate::ops::ConvGeometry;
use crate::params::ParamId;
use crate::real::Real;
use crate::tensor::Tensor;

mod count;
pub use count::ShapeCounter;

/// The operation set used by every block of the network.
pub trait Backend<T: Real> {
    type Var: Clone;

    fn shape<'s>(&'s self, v: &'s Self::Var) -> &'s [usize];
    fn param(&mut self, id: ParamId) -> Self::Var;
    fn constant(&mut self, t: Tensor<T>) -> Self::Var;

    fn conv2d(
        &mut self,
        x: &Self::Var,
        weight: &Self::Var,
        bias: Option<&Self::Var>,
        geometry: ConvGeometry,
    ) -> Result<Self::Var>;
    fn avg_pool2d(
        &mut self,
        x: &Self::Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self::Var>;
    /// `a · b`, or `a · bᵀ` when `transpose_b`.
    fn matmul(&mut self, a: &Self::Var, b: &Self::Var, transpose_b: bool) -> Result<Self::Var>;
    fn softmax_rows(&mut self, x: &Self::Var) -> Result<Self::Var>;
    /// Row-wise top-k masked softmax for each `k` in `ks`, mixed with weights
    /// `softmax(logits)`.
    fn top_k_mixture(&mut self, scores: &Self::Var, logits: &Self::Var, ks: &[usize]) -> Result<Self::Var>;
    fn layer_norm(&mut self, x: &Self::Var, gamma: &Self::Var, beta: &Self::Var, eps: T)
        -> Result<Self::Var>;
    fn relu(&mut self, x: &Self::Var) -> Self::Var;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn scale(&mut self, x: &Self::Var, s: T) -> Self::Var;
    fn concat_channels(&mut self, xs: &[&Self::Var]) -> Result<Self::Var>;
    fn slice_channels(&mut self, x: &Self::Var, start: usize, len: usize) -> Result<Self::Var>;
    fn reshape(&mut self, x: &Self::Var, shape: &[usize]) -> Result<Self::Var>;
    fn global_avg_channels(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn weighted_sum(&mut self, xs: &[&Self::Var], weights: &Self::Var) -> Result<Self::Var>;
    fn pixel_shuffle(&mut self, x: &Self::Var, factor: usize) -> Result<Self::Var>;
    fn pixel_unshuffle(&mut self, x: &Self::Var, factor: usize) -> Result<Self::Var>;
    fn l1_loss(&mut self, pred: &Self::Var, target: &Self::Var) -> Result<Self::Var>;
    fn sum(&mut self, x: &Self::Var) -> Self::Var;
}
