//! Closed-form parameter and operation counts.
//!
//! Operations follow [`ShapeCounter`](crate::autodiff::ShapeCounter):
//! convolutions and products are `2 ·` multiply-accumulates (padding taps
//! included), pooling is one operation per summed element, and each mixing
//! step is one multiply-add per element.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::config::{NetworkConfig, LEVELS};
use crate::blocks::{expanded_channels, ExpertKind, EXPERT_KINDS};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    fn push(&mut self, name: String, params: u64, flops: u64) {
        if let Some(r) = self.rows.iter_mut().find(|r| r.name == name) {
            r.params += params;
            r.flops += flops;
        } else {
            self.rows.push(CostRow { name, params, flops });
        }
    }

    /// Rows whose name ends with `suffix`, summed.
    pub fn by_kind(&self, suffix: &str) -> (u64, u64) {
        self.rows
            .iter()
            .filter(|r| r.name.ends_with(suffix))
            .fold((0, 0), |(p, f), r| (p + r.params, f + r.flops))
    }
}

/// `(params, flops)` of a pointwise or `k×k` convolution at `hw` output pixels.
fn conv(cin_per_group: u64, cout: u64, k: u64, hw: u64, bias: bool) -> (u64, u64) {
    let w = cout * cin_per_group * k * k;
    (w + if bias { cout } else { 0 }, 2 * w * hw)
}

fn attention(c: u64, heads: u64, hw: u64, ratios: u64) -> (u64, u64) {
    let ch = c / heads;
    let (p1, f1) = conv(c, 3 * c, 1, hw, false);
    let (p2, f2) = conv(1, 3 * c, 3, hw, false);
    let (p3, f3) = conv(c, c, 1, hw, false);
    let scores = 2 * heads * ch * hw * ch;
    let mixing = 2 * ratios * heads * ch * ch;
    let values = 2 * heads * ch * ch * hw;
    (p1 + p2 + p3 + ratios, f1 + f2 + f3 + scores + mixing + values)
}

fn ffn(c: u64, e: u64, hw: u64) -> (u64, u64) {
    [
        conv(c, e, 1, hw, false),
        conv(1, e, 3, hw, false),
        conv(1, e, 5, hw, false),
        conv(1, 2 * e, 3, hw, false),
        conv(1, 2 * e, 5, hw, false),
        conv(4 * e, c, 1, hw, false),
    ]
    .iter()
    .fold((0, 0), |(p, f), (a, b)| (p + a, f + b))
}

fn mefc(c: u64, experts: usize, hidden: u64, hw: u64) -> (u64, u64) {
    let o = experts as u64;
    let (mut p, mut f) = (0, 0);
    for kind in &EXPERT_KINDS[..experts] {
        let k = match *kind {
            ExpertKind::AvgPool => {
                f += 9 * c * hw;
                continue;
            }
            ExpertKind::Separable(k) => k as u64,
            ExpertKind::Dilated(_) => 3,
        };
        let (dp, df) = conv(1, c, k, hw, false);
        let (pp, pf) = conv(c, c, 1, hw, false);
        p += dp + pp;
        f += df + pf;
    }
    p += hidden * c + o * hidden;
    f += 2 * hidden * c + 2 * o * hidden;
    f += 2 * o * c * hw;
    let (fp, ff) = conv(c, c, 1, hw, true);
    (p + fp, f + ff)
}

/// Per-module costs of the network on an `h × w` input.
pub fn cost_report(cfg: &NetworkConfig, h: usize, w: usize) -> Result<CostReport> {
    cfg.validate()?;
    let mut r = CostReport::default();
    let hw0 = (h * w) as u64;
    let c0 = cfg.channels as u64;
    let ratios = cfg.ratios.len() as u64;
    let (p, f) = conv(3, c0, 3, hw0, true);
    r.push("patch_embed".into(), p, f);
    let n_mefc = if cfg.mefc { cfg.mefc_blocks as u64 } else { 0 };
    let (mp, mf) = mefc(c0, cfg.experts, cfg.gate_hidden as u64, hw0);
    for l in 0..LEVELS {
        let c = cfg.level_channels(l) as u64;
        let hw = hw0 >> (2 * l);
        let e = expanded_channels(c as usize, cfg.ffn_ratio) as u64;
        let blocks = cfg.depths[l] as u64 * if l + 1 < LEVELS { 2 } else { 1 };
        let (ap, af) = attention(c, cfg.heads[l] as u64, hw, ratios);
        let (fp, ff) = ffn(c, e, hw);
        r.push(format!("level{}.norm", l + 1), blocks * 4 * c, 0);
        r.push(format!("level{}.attention", l + 1), blocks * ap, blocks * af);
        r.push(format!("level{}.ffn", l + 1), blocks * fp, blocks * ff);
    }
    for l in 0..LEVELS - 1 {
        let c = cfg.level_channels(l) as u64;
        let hw = hw0 >> (2 * l);
        let (dp, df) = conv(4 * c, 2 * c, 1, hw / 4, false);
        let (up, uf) = conv(2 * c, 4 * c, 1, hw / 4, false);
        let (fp, ff) = conv(2 * c, c, 1, hw, false);
        r.push(format!("level{}.resample", l + 1), dp + up, df + uf);
        r.push(format!("level{}.skip", l + 1), fp, ff);
    }
    r.push("mefc_pre".into(), n_mefc * mp, n_mefc * mf);
    r.push("mefc_post".into(), n_mefc * mp, n_mefc * mf);
    let (p, f) = conv(c0, 3, 3, hw0, true);
    r.push("output".into(), p, f);
    Ok(r)
}

/// Total operations of one forward pass on an `h × w` input.
pub fn count_flops(cfg: &NetworkConfig, h: usize, w: usize) -> Result<u64> {
    Ok(cost_report(cfg, h, w)?.flops())
}
