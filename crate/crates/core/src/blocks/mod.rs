//! The transformer and compensator blocks of the network.
//!
//! Every forward function is generic over [`Backend`], so the same code runs
//! for inference, for training on a tape, and for shape-only cost counting.

mod attention;
mod mefc;
mod msfn;
mod stb;

pub use attention::{dense_channel_attention, sparse_attention, temperature, tksa_forward, AttentionParams};
pub use mefc::{mefc_forward, Expert, ExpertKind, MefcParams, EXPERT_KINDS};
pub use msfn::{expanded_channels, msfn_forward, MsfnParams};
pub use stb::{stb_forward, StbParams};

use crate::autodiff::Backend;
use crate::error::Result;
use crate::ops::ConvGeometry;
use crate::params::ParamId;
use crate::real::Real;

/// Convolution with stored weight (and optional bias).
pub(crate) fn conv<T: Real, B: Backend<T>>(
    b: &mut B,
    x: &B::Var,
    weight: ParamId,
    bias: Option<ParamId>,
    geometry: ConvGeometry,
) -> Result<B::Var> {
    let w = b.param(weight);
    let bias = bias.map(|id| b.param(id));
    b.conv2d(x, &w, bias.as_ref(), geometry)
}

/// Channel layer norm with stored affine parameters.
pub(crate) fn norm<T: Real, B: Backend<T>>(
    b: &mut B,
    x: &B::Var,
    gamma: ParamId,
    beta: ParamId,
) -> Result<B::Var> {
    let g = b.param(gamma);
    let be = b.param(beta);
    b.layer_norm(x, &g, &be, T::from_f64(crate::ops::LAYER_NORM_EPS))
}
