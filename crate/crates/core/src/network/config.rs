use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Number of resolution levels in the encoder-decoder.
pub const LEVELS: usize = 4;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Channels at level 1; level `l` has `channels · 2^(l-1)`.
    pub channels: usize,
    /// Compensator blocks at each end of the network (`N0`).
    pub mefc_blocks: usize,
    /// Transformer blocks per level (`N1..N4`); decoder levels mirror 1..3.
    pub depths: [usize; LEVELS],
    pub heads: [usize; LEVELS],
    pub ffn_ratio: f64,
    pub mefc: bool,
    pub experts: usize,
    pub gate_hidden: usize,
    /// Closed interval every candidate ratio must lie in.
    pub sparsity: (f64, f64),
    /// Candidate kept fractions mixed by every attention layer.
    pub ratios: Vec<f64>,
}

impl NetworkConfig {
    /// The published architecture: C = 48, depths {4, 4, 6, 6, 8}.
    pub fn full() -> Self {
        Self {
            channels: 48,
            mefc_blocks: 4,
            depths: [4, 6, 6, 8],
            heads: [1, 2, 4, 8],
            ffn_ratio: 2.66,
            mefc: true,
            experts: 8,
            gate_hidden: 32,
            sparsity: (0.5, 0.8),
            ratios: vec![1.0 / 2.0, 2.0 / 3.0, 3.0 / 4.0, 4.0 / 5.0],
        }
    }

    /// Desk-scale training configuration: C = 8, depths {1, 1, 2, 2, 2}.
    pub fn tiny() -> Self {
        Self {
            channels: 8,
            mefc_blocks: 1,
            depths: [1, 2, 2, 2],
            heads: [1, 2, 4, 4],
            ..Self::full()
        }
    }

    /// Smallest full network: C = 8 and a single block everywhere.
    pub fn smoke() -> Self {
        Self {
            channels: 8,
            mefc_blocks: 1,
            depths: [1, 1, 1, 1],
            heads: [1, 2, 4, 8],
            ..Self::full()
        }
    }

    /// Replaces the candidate set by one fixed ratio, widening the interval
    /// to admit it.
    pub fn with_fixed_ratio(mut self, ratio: f64) -> Self {
        self.ratios = vec![ratio];
        self.sparsity = (ratio, ratio);
        self
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.channels << level
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        for l in 0..LEVELS {
            let (c, h) = (self.level_channels(l), self.heads[l]);
            if h == 0 || c % h != 0 {
                return bad(format!(
                    "level {} has {c} channels, not divisible by {h} heads",
                    l + 1
                ));
            }
            if self.depths[l] == 0 {
                return bad(format!("level {} depth must be at least 1", l + 1));
            }
        }
        if self.mefc && self.mefc_blocks == 0 {
            return bad("compensator enabled with zero blocks".into());
        }
        if !(self.ffn_ratio > 1.0) {
            return bad(format!("ffn ratio {} must exceed 1", self.ffn_ratio));
        }
        if self.experts == 0 || self.experts > crate::blocks::EXPERT_KINDS.len() {
            return bad(format!("{} experts, expected 1..=8", self.experts));
        }
        if self.gate_hidden == 0 {
            return bad("gate hidden width must be positive".into());
        }
        let (lo, hi) = self.sparsity;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!(
                "sparsity interval [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1"
            ));
        }
        if self.ratios.is_empty() {
            return bad("empty ratio set".into());
        }
        if let Some(r) = self.ratios.iter().find(|r| !(**r >= lo && **r <= hi)) {
            return bad(format!("ratio {r} outside [{lo}, {hi}]"));
        }
        Ok(())
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::full()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for c in [
            NetworkConfig::full(),
            NetworkConfig::tiny(),
            NetworkConfig::smoke(),
        ] {
            c.validate().unwrap();
        }
        NetworkConfig::tiny().with_fixed_ratio(0.125).validate().unwrap();
    }

    #[test]
    fn default_channel_growth() {
        let c = NetworkConfig::full();
        let ch: Vec<_> = (0..LEVELS).map(|l| c.level_channels(l)).collect();
        assert_eq!(ch, [48, 96, 192, 384]);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = NetworkConfig::tiny();
        c.heads[0] = 3;
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::tiny();
        c.ratios.push(0.9);
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::tiny();
        c.depths[2] = 0;
        assert!(c.validate().is_err());
    }
}
