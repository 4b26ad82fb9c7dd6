//! Deterministic synthetic pair sets.

use std::path::{Path, PathBuf};

use drsformer_core::augment::Pair;
use drsformer_core::image::Image;
use drsformer_core::network::SIZE_MULTIPLE;
use drsformer_core::rain::{procedural_scene, synth_rain, RainParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::imageio::save_ppm;
use crate::manifest::{Entry, Manifest, Split, FILE_NAME};

/// What to generate.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    /// Every pair's streaks use these ranges with a per-pair seed.
    pub rain: RainParams,
    /// Pairs at the end of the set that form the held-out split.
    pub test_count: usize,
    pub seed: u64,
}

/// One generated pair.
pub struct Sample {
    pub name: String,
    pub split: Split,
    pub clean: Image,
    pub rainy: Image,
}

impl Sample {
    pub fn pair(&self) -> Pair {
        Pair::new(self.rainy.tensor().clone(), self.clean.tensor().clone()).expect("same size")
    }
}

/// Parses `HxW`.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| invalid(format!("size {s:?} must look like HxW")))?;
    let dim = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| invalid(format!("bad size {s:?}")))
    };
    Ok((dim(h)?, dim(w)?))
}

impl DatasetSpec {
    /// A tenth of the pairs, at least one and never all of them, are held out.
    pub fn default_test_count(count: usize) -> usize {
        if count < 2 {
            0
        } else {
            (count / 10).clamp(1, count - 1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(invalid("count must be positive"));
        }
        if self.width == 0
            || self.height == 0
            || self.width % SIZE_MULTIPLE != 0
            || self.height % SIZE_MULTIPLE != 0
        {
            return Err(invalid(format!(
                "size {}x{} must be a positive multiple of {SIZE_MULTIPLE} in both dimensions; \
                 stored pairs are not padded (inference pads arbitrary sizes itself)",
                self.height, self.width
            )));
        }
        if self.test_count > self.count {
            return Err(invalid("more test pairs than pairs"));
        }
        self.rain.validate()?;
        Ok(())
    }

    /// Generates every pair in order; pair `i` depends only on the seed and `i`.
    pub fn generate(&self) -> Result<Vec<Sample>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let width = (self.count - 1).max(1).to_string().len().max(4);
        (0..self.count)
            .map(|i| {
                let (scene_seed, rain_seed) = (rng.random::<u64>(), rng.random::<u64>());
                let clean = procedural_scene(self.width, self.height, scene_seed)?;
                let params = RainParams {
                    seed: rain_seed,
                    ..self.rain.clone()
                };
                let rainy = synth_rain(&clean, &params)?;
                let split = if i >= self.count - self.test_count {
                    Split::Test
                } else {
                    Split::Train
                };
                Ok(Sample {
                    name: format!("{i:0width$}"),
                    split,
                    clean,
                    rainy,
                })
            })
            .collect()
    }

    /// Writes `clean/`, `rainy/` and the manifest under `out`.
    pub fn write(&self, out: &Path) -> Result<Manifest> {
        let mut entries = Vec::new();
        for s in self.generate()? {
            let rainy = PathBuf::from("rainy").join(format!("{}.ppm", s.name));
            let clean = PathBuf::from("clean").join(format!("{}.ppm", s.name));
            save_ppm(&s.rainy, &out.join(&rainy))?;
            save_ppm(&s.clean, &out.join(&clean))?;
            entries.push(Entry {
                split: s.split,
                rainy,
                clean,
            });
        }
        let manifest = Manifest {
            root: out.to_path_buf(),
            seed: Some(self.seed),
            entries,
        };
        manifest.save(&out.join(FILE_NAME))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use drsformer_core::rain::RainPreset;

    fn spec(w: usize, h: usize) -> DatasetSpec {
        DatasetSpec {
            count: 3,
            width: w,
            height: h,
            rain: RainPreset::Light.params(0),
            test_count: 1,
            seed: 7,
        }
    }

    #[test]
    fn sizes_must_be_multiples_of_eight() {
        let err = spec(33, 33).validate().unwrap_err().to_string();
        assert!(err.contains("multiple of 8"), "{err}");
        spec(40, 16).validate().unwrap();
        assert_eq!(parse_size("16x40").unwrap(), (16, 40));
        assert!(parse_size("16").is_err());
    }

    #[test]
    fn pairs_are_deterministic_and_split() {
        let a = spec(16, 16).generate().unwrap();
        let b = spec(16, 16).generate().unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.rainy, y.rainy);
            assert_eq!(x.clean, y.clean);
        }
        assert_ne!(a[0].clean, a[1].clean);
        let splits: Vec<Split> = a.iter().map(|s| s.split).collect();
        assert_eq!(splits, [Split::Train, Split::Train, Split::Test]);
        assert_eq!(DatasetSpec::default_test_count(200), 20);
        assert_eq!(DatasetSpec::default_test_count(3), 1);
        assert_eq!(DatasetSpec::default_test_count(1), 0);
    }
}
