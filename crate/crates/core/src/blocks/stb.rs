//! Sparse transformer block.

use alloc::format;

use super::{msfn_forward, norm, tksa_forward, AttentionParams, MsfnParams};
use crate::autodiff::Backend;
use crate::error::Result;
use crate::init::Initializer;
use crate::params::ParamId;
use crate::real::Real;

/// Attention norm and layer plus the feed-forward block (which owns the
/// second norm).
#[derive(Clone, Debug)]
pub struct StbParams {
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub attn: AttentionParams,
    pub ffn: MsfnParams,
}

impl StbParams {
    pub fn build<T: Real>(
        init: &mut Initializer<'_, T>,
        prefix: &str,
        channels: usize,
        heads: usize,
        ratios: &[f64],
        ffn_ratio: f64,
    ) -> Result<Self> {
        Ok(Self {
            norm_gamma: init.ones(format!("{prefix}.norm1.weight"), [channels]),
            norm_beta: init.zeros(format!("{prefix}.norm1.bias"), [channels]),
            attn: AttentionParams::build(init, &format!("{prefix}.attn"), channels, heads, ratios)?,
            ffn: MsfnParams::build(init, &format!("{prefix}.ffn"), channels, ffn_ratio)?,
        })
    }
}

/// `x' = x + TKSA(LN(x))`, then `x' + MSFN-branch(LN(x'))`.
pub fn stb_forward<T: Real, B: Backend<T>>(b: &mut B, x: &B::Var, p: &StbParams) -> Result<B::Var> {
    let n = norm(b, x, p.norm_gamma, p.norm_beta)?;
    let a = tksa_forward(b, &n, &p.attn)?;
    let x1 = b.add(x, &a)?;
    msfn_forward(b, &x1, &p.ffn)
}
