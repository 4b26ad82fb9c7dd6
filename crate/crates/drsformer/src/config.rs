//! TOML run configuration.
//!
//! Every key is optional and falls back to a preset. The resolved form, with
//! every key filled in, is written next to a run's outputs and reproduces it.
//!
//! ```toml
//! [network]
//! preset = "tiny"        # full | tiny | smoke
//! ratios = [0.5, 0.75]
//!
//! [train]
//! iterations = 2000
//! seed = 3
//! clip = 1.0             # 0 disables clipping
//!
//! [rain]
//! preset = "light"       # light | heavy
//! density = 4.0
//! ```

use std::path::Path;

use drsformer_core::network::{NetworkConfig, LEVELS};
use drsformer_core::rain::{RainParams, RainPreset};
use drsformer_core::train::{AdamW, LrSchedule, TrainSettings};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, read, write, Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub rain: RainSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub preset: Option<String>,
    pub channels: Option<usize>,
    pub mefc_blocks: Option<usize>,
    pub depths: Option<[usize; LEVELS]>,
    pub heads: Option<[usize; LEVELS]>,
    pub ffn_ratio: Option<f64>,
    pub mefc: Option<bool>,
    pub experts: Option<usize>,
    pub gate_hidden: Option<usize>,
    pub sparsity: Option<[f64; 2]>,
    pub ratios: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: Option<u64>,
    pub batch: Option<usize>,
    pub patch: Option<usize>,
    pub eval_interval: Option<u64>,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub lr_floor: Option<f64>,
    /// Iterations at the fixed rate; defaults to a quarter of the run.
    pub lr_fixed_iters: Option<u64>,
    /// Iterations of cosine decay; defaults to the rest of the run.
    pub lr_cosine_iters: Option<u64>,
    pub clip: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub weight_decay: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RainSection {
    pub preset: Option<String>,
    pub density: Option<f64>,
    pub length: Option<[f64; 2]>,
    pub angle: Option<[f64; 2]>,
    pub width: Option<[f64; 2]>,
    pub intensity: Option<[f64; 2]>,
    pub blur_sigma: Option<f64>,
}

/// A configuration with every value decided.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub network: NetworkConfig,
    pub train: TrainSettings,
    pub rain: RainParams,
}

fn network_preset(name: &str) -> Result<NetworkConfig> {
    match name {
        "full" => Ok(NetworkConfig::full()),
        "tiny" => Ok(NetworkConfig::tiny()),
        "smoke" => Ok(NetworkConfig::smoke()),
        _ => Err(invalid(format!(
            "unknown network preset {name:?} (full, tiny, smoke)"
        ))),
    }
}

fn pair([a, b]: [f64; 2]) -> (f64, f64) {
    (a, b)
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| invalid(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "config is not UTF-8"))?;
        toml::from_str(&text).map_err(|e| invalid(format!("{}: {}", path.display(), e.message())))
    }

    /// Fills unset keys from the presets and validates the result.
    pub fn resolve(&self) -> Result<Resolved> {
        let n = &self.network;
        let base = network_preset(n.preset.as_deref().unwrap_or("tiny"))?;
        let network = NetworkConfig {
            channels: n.channels.unwrap_or(base.channels),
            mefc_blocks: n.mefc_blocks.unwrap_or(base.mefc_blocks),
            depths: n.depths.unwrap_or(base.depths),
            heads: n.heads.unwrap_or(base.heads),
            ffn_ratio: n.ffn_ratio.unwrap_or(base.ffn_ratio),
            mefc: n.mefc.unwrap_or(base.mefc),
            experts: n.experts.unwrap_or(base.experts),
            gate_hidden: n.gate_hidden.unwrap_or(base.gate_hidden),
            sparsity: n.sparsity.map(pair).unwrap_or(base.sparsity),
            ratios: n.ratios.clone().unwrap_or(base.ratios),
        };
        network.validate()?;

        let t = &self.train;
        let desk = TrainSettings::desk(t.seed.unwrap_or(0));
        let iterations = t.iterations.unwrap_or(desk.iterations);
        let lr = t.lr.unwrap_or(desk.schedule.start);
        let default_schedule = LrSchedule::desk(iterations, lr);
        let schedule = LrSchedule {
            fixed_iters: t.lr_fixed_iters.unwrap_or(default_schedule.fixed_iters),
            cosine_iters: t.lr_cosine_iters.unwrap_or(default_schedule.cosine_iters),
            start: lr,
            floor: t.lr_floor.unwrap_or(default_schedule.floor),
        };
        if !(schedule.start > 0.0 && schedule.floor > 0.0 && schedule.floor <= schedule.start) {
            return Err(invalid(format!(
                "learning rates must satisfy 0 < lr_floor <= lr, got {} and {}",
                schedule.floor, schedule.start
            )));
        }
        let clip = t.clip.or(desk.clip).filter(|&c| c > 0.0);
        let d = AdamW::default();
        let train = TrainSettings {
            iterations,
            batch: t.batch.unwrap_or(desk.batch),
            patch: t.patch.unwrap_or(desk.patch),
            eval_interval: t.eval_interval.unwrap_or(desk.eval_interval),
            seed: desk.seed,
            schedule,
            clip,
            optimizer: AdamW {
                beta1: t.beta1.unwrap_or(d.beta1),
                beta2: t.beta2.unwrap_or(d.beta2),
                eps: t.eps.unwrap_or(d.eps),
                weight_decay: t.weight_decay.unwrap_or(d.weight_decay),
            },
        };
        train.validate()?;

        let r = &self.rain;
        let preset: RainPreset = r.preset.as_deref().unwrap_or("light").parse()?;
        let p = preset.params(train.seed);
        let rain = RainParams {
            density: r.density.unwrap_or(p.density),
            length: r.length.map(pair).unwrap_or(p.length),
            angle: r.angle.map(pair).unwrap_or(p.angle),
            width: r.width.map(pair).unwrap_or(p.width),
            intensity: r.intensity.map(pair).unwrap_or(p.intensity),
            blur_sigma: r.blur_sigma.unwrap_or(p.blur_sigma),
            seed: p.seed,
        };
        rain.validate()?;
        Ok(Resolved { network, train, rain })
    }
}

impl Resolved {
    pub fn to_file(&self) -> ConfigFile {
        let (n, t, r) = (&self.network, &self.train, &self.rain);
        ConfigFile {
            network: network_section(n),
            train: TrainSection {
                iterations: Some(t.iterations),
                batch: Some(t.batch),
                patch: Some(t.patch),
                eval_interval: Some(t.eval_interval),
                seed: Some(t.seed),
                lr: Some(t.schedule.start),
                lr_floor: Some(t.schedule.floor),
                lr_fixed_iters: Some(t.schedule.fixed_iters),
                lr_cosine_iters: Some(t.schedule.cosine_iters),
                clip: Some(t.clip.unwrap_or(0.0)),
                beta1: Some(t.optimizer.beta1),
                beta2: Some(t.optimizer.beta2),
                eps: Some(t.optimizer.eps),
                weight_decay: Some(t.optimizer.weight_decay),
            },
            rain: RainSection {
                preset: None,
                density: Some(r.density),
                length: Some([r.length.0, r.length.1]),
                angle: Some([r.angle.0, r.angle.1]),
                width: Some([r.width.0, r.width.1]),
                intensity: Some([r.intensity.0, r.intensity.1]),
                blur_sigma: Some(r.blur_sigma),
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_file()).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, self.to_toml().as_bytes())
    }
}

fn network_section(n: &NetworkConfig) -> NetworkSection {
    NetworkSection {
        preset: None,
        channels: Some(n.channels),
        mefc_blocks: Some(n.mefc_blocks),
        depths: Some(n.depths),
        heads: Some(n.heads),
        ffn_ratio: Some(n.ffn_ratio),
        mefc: Some(n.mefc),
        experts: Some(n.experts),
        gate_hidden: Some(n.gate_hidden),
        sparsity: Some([n.sparsity.0, n.sparsity.1]),
        ratios: Some(n.ratios.clone()),
    }
}

/// Canonical TOML of an architecture, the text a checkpoint embeds.
pub fn network_toml(n: &NetworkConfig) -> String {
    toml::to_string(&network_section(n)).expect("network section serializes")
}

pub fn parse_network_toml(text: &str) -> Result<NetworkConfig> {
    let section: NetworkSection =
        toml::from_str(text).map_err(|e| invalid(format!("embedded network config: {}", e.message())))?;
    ConfigFile {
        network: section,
        ..ConfigFile::default()
    }
    .resolve()
    .map(|r| r.network)
}

/// SHA-256 of [`network_toml`].
pub fn network_digest(n: &NetworkConfig) -> [u8; 32] {
    Sha256::digest(network_toml(n).as_bytes()).into()
}
