//! Paired crops and flips for training.

use alloc::format;

use rand::Rng;

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor;

/// A `(rainy, clean)` pair of `[3, H, W]` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub rainy: Tensor<f32>,
    pub clean: Tensor<f32>,
}

impl Pair {
    pub fn new(rainy: Tensor<f32>, clean: Tensor<f32>) -> Result<Self> {
        if rainy.shape() != clean.shape() || rainy.rank() != 3 {
            return Err(shape_err(
                "pair",
                format!("rainy {:?} vs clean {:?}", rainy.shape(), clean.shape()),
            ));
        }
        Ok(Self { rainy, clean })
    }

    pub fn size(&self) -> (usize, usize) {
        let s = self.rainy.shape();
        (s[1], s[2])
    }
}

fn crop(t: &Tensor<f32>, top: usize, left: usize, size: usize) -> Tensor<f32> {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    Tensor::from_fn([s[0], size, size], |i| {
        let (c, r) = (i / (size * size), i % (size * size));
        t.data()[c * h * w + (top + r / size) * w + left + r % size]
    })
}

/// The `size × size` window at `(top, left)` from both images.
pub fn crop_at(pair: &Pair, top: usize, left: usize, size: usize) -> Result<Pair> {
    let (h, w) = pair.size();
    if size == 0 || top + size > h || left + size > w {
        return Err(arg_err(
            "crop",
            format!("{size}x{size} window at ({top}, {left}) does not fit {h}x{w}"),
        ));
    }
    Ok(Pair {
        rainy: crop(&pair.rainy, top, left, size),
        clean: crop(&pair.clean, top, left, size),
    })
}

/// A uniformly placed `size × size` window, identical for both images.
pub fn crop_patch(pair: &Pair, size: usize, rng: &mut impl Rng) -> Result<Pair> {
    let (h, w) = pair.size();
    if size > h || size > w {
        return Err(arg_err("crop", format!("patch {size} larger than {h}x{w}")));
    }
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    crop_at(pair, top, left, size)
}

fn flip(t: &Tensor<f32>, horizontal: bool, vertical: bool) -> Tensor<f32> {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    Tensor::from_fn(s.to_vec(), |i| {
        let (c, y, x) = (i / (h * w), i / w % h, i % w);
        let sy = if vertical { h - 1 - y } else { y };
        let sx = if horizontal { w - 1 - x } else { x };
        t.data()[c * h * w + sy * w + sx]
    })
}

/// Mirrors both images the same way.
pub fn flip_pair(pair: &Pair, horizontal: bool, vertical: bool) -> Pair {
    Pair {
        rainy: flip(&pair.rainy, horizontal, vertical),
        clean: flip(&pair.clean, horizontal, vertical),
    }
}

/// Independent fair coin flips for the horizontal and vertical mirror.
pub fn random_flip(pair: &Pair, rng: &mut impl Rng) -> Pair {
    let h = rng.random_bool(0.5);
    let v = rng.random_bool(0.5);
    flip_pair(pair, h, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::ops;
    use crate::rain::{procedural_scene, synth_rain, RainPreset};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(seed: u64) -> Pair {
        let clean = procedural_scene(40, 36, seed).unwrap();
        let rainy = synth_rain(&clean, &RainPreset::Heavy.params(seed)).unwrap();
        Pair::new(rainy.into_tensor(), clean.into_tensor()).unwrap()
    }

    fn diff(p: &Pair) -> Tensor<f32> {
        ops::add(&p.rainy, &ops::scale(&p.clean, -1.0)).unwrap()
    }

    #[test]
    fn double_flip_is_identity() {
        let p = pair(1);
        for (h, v) in [(true, false), (false, true), (true, true)] {
            assert_eq!(flip_pair(&flip_pair(&p, h, v), h, v), p);
            assert_ne!(flip_pair(&p, h, v), p);
        }
    }

    #[test]
    fn full_crop_is_identity() {
        let clean = procedural_scene(24, 24, 2).unwrap().into_tensor();
        let p = Pair::new(clean.clone(), clean).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(crop_patch(&p, 24, &mut rng).unwrap(), p);
        assert!(crop_patch(&p, 25, &mut rng).is_err());
    }

    #[test]
    fn augmentation_keeps_pairs_aligned() {
        for seed in 0..5 {
            let p = pair(seed);
            let d = Pair::new(diff(&p), diff(&p)).unwrap();
            let mut r1 = ChaCha8Rng::seed_from_u64(seed);
            let mut r2 = ChaCha8Rng::seed_from_u64(seed);
            let a = random_flip(&crop_patch(&p, 16, &mut r1).unwrap(), &mut r1);
            let da = random_flip(&crop_patch(&d, 16, &mut r2).unwrap(), &mut r2);
            assert_eq!(diff(&a), da.rainy);
        }
    }

    #[test]
    fn streak_mask_stays_registered() {
        let p = pair(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = crop_patch(&p, 20, &mut rng).unwrap();
        let mask = |t: &Tensor<f32>| t.data().iter().map(|v| *v > 1e-6).collect::<alloc::vec::Vec<_>>();
        // Locate the crop offset by matching the clean image, then check the
        // rain mask agrees at that offset and at no shifted one.
        let full = diff(&p);
        let mut hits = alloc::vec::Vec::new();
        for top in 0..=16 {
            for left in 0..=20 {
                let w = crop_at(&p, top, left, 20).unwrap();
                if w.clean == c.clean {
                    hits.push((top, left));
                    let fd = crop_at(&Pair::new(full.clone(), full.clone()).unwrap(), top, left, 20).unwrap();
                    assert_eq!(mask(&fd.rainy), mask(&diff(&c)));
                }
            }
        }
        assert_eq!(hits.len(), 1);
        let _ = Image::from_tensor(&c.rainy).unwrap();
    }

    #[test]
    fn mismatched_pair_rejected() {
        assert!(Pair::new(Tensor::zeros([3, 4, 4]), Tensor::zeros([3, 4, 5])).is_err());
    }
}
