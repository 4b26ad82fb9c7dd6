//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "DRSF" | u32 version | [u8; 32] architecture digest
//! u32 len | architecture TOML
//! u64 iteration
//! u32 count | count × (u32 len | name | u32 rank | rank × u64 dim | f32 data)
//! u8 has_optimizer | [u64 step | count × f32 m | count × f32 v]
//! [u8; 32] SHA-256 of everything above
//! ```

use std::path::Path;

use drsformer_core::network::{build_model, Model, NetworkConfig};
use drsformer_core::train::OptimizerState;
use drsformer_core::{ParamStore, Tensor};
use sha2::{Digest, Sha256};

use crate::config::{network_digest, network_toml, parse_network_toml};
use crate::error::{invalid, read, write, Error, Result};

pub const MAGIC: &[u8; 4] = b"DRSF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    /// Completed training iterations.
    pub iteration: u64,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerState>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or("truncated checkpoint")?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, String> {
        let raw = self.take(n.checked_mul(4).ok_or("tensor too large")?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn str(&mut self) -> Result<&'a str, String> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| "name is not UTF-8".into())
    }
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    /// The initial state of a fresh model.
    pub fn from_model(model: &Model<f32>) -> Self {
        Self {
            network: model.config.clone(),
            iteration: 0,
            params: model.store.clone(),
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&network_digest(&self.network));
        put_str(&mut out, &network_toml(&self.network));
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f32s(&mut out, t.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&s.step.to_le_bytes());
                for m in &s.m {
                    put_f32s(&mut out, m.data());
                }
                for v in &s.v {
                    put_f32s(&mut out, v.data());
                }
            }
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        if bytes.len() < 4 + 4 + 32 + 32 {
            return Err("truncated checkpoint".into());
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err("checksum mismatch (corrupted or truncated checkpoint)".into());
        }
        let mut r = Reader { bytes: body, at: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let network = parse_network_toml(r.str()?).map_err(|e| e.to_string())?;
        if network_digest(&network) != digest {
            return Err("embedded architecture does not match its digest".into());
        }
        let iteration = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.str()?.to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or("tensor too large")?;
            let data = r.f32s(n)?;
            params.add(name, Tensor::new(shape, data).map_err(|e| e.to_string())?);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut read_all = || -> Result<Vec<Tensor<f32>>, String> {
                    params
                        .iter()
                        .map(|(_, _, t)| {
                            let d = r.f32s(t.len())?;
                            Tensor::new(t.shape().to_vec(), d).map_err(|e| e.to_string())
                        })
                        .collect()
                };
                let m = read_all()?;
                let v = read_all()?;
                Some(OptimizerState { step, m, v })
            }
            f => return Err(format!("bad optimizer flag {f}")),
        };
        if r.at != body.len() {
            return Err("trailing bytes after checkpoint body".into());
        }
        Ok(Self {
            network,
            iteration,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read(path)?).map_err(|d| Error::format(path, d))
    }

    /// Builds the embedded architecture and installs the stored weights.
    pub fn model(&self) -> Result<Model<f32>> {
        self.model_for(&self.network)
    }

    /// Installs the stored weights into `network`, which may differ from the
    /// embedded architecture only where parameter names and shapes agree.
    pub fn model_for(&self, network: &NetworkConfig) -> Result<Model<f32>> {
        let mut model = build_model::<f32>(network, 0)?;
        if model.store.len() != self.params.len() {
            return Err(invalid(format!(
                "checkpoint has {} parameters, the model {}",
                self.params.len(),
                model.store.len()
            )));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let src = self
                .params
                .find(&name)
                .map(|s| self.params.get(s))
                .ok_or_else(|| invalid(format!("checkpoint lacks parameter {name}")))?;
            let dst = model.store.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(invalid(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let model = build_model::<f32>(&NetworkConfig::smoke(), 4).unwrap();
        let mut state = OptimizerState::new(&model.store);
        state.step = 7;
        state.m[3].data_mut()[0] = 0.25;
        state.v[5].data_mut()[1] = -1.5e-9;
        Checkpoint {
            iteration: 7,
            optimizer: Some(state),
            ..Checkpoint::from_model(&model)
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.model().unwrap().store, c.params);
    }

    #[test]
    fn damage_is_detected() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().contains("magic"));
        let mut flipped = bytes.clone();
        flipped[200] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped).unwrap_err().contains("checksum"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]).is_err());
        assert!(Checkpoint::from_bytes(b"DRSF").is_err());
    }

    #[test]
    fn loading_into_another_architecture_fails() {
        let c = sample();
        let err = c.model_for(&NetworkConfig::tiny()).unwrap_err();
        assert!(err.to_string().contains("parameter"), "{err}");
    }
}
