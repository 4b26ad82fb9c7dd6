//! Channel concatenation and slicing, pixel (un)shuffle, channel pooling.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Stacks tensors along their leading (channel) extent.
pub fn concat_channels<T: Real>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| arg_err("concat_channels", "no inputs"))?;
    if first.rank() == 0 {
        return Err(shape_err("concat_channels", "scalar input"));
    }
    let tail = &first.shape()[1..];
    let mut channels = 0;
    for x in xs {
        if x.rank() != first.rank() || &x.shape()[1..] != tail {
            return Err(shape_err(
                "concat_channels",
                format!("trailing extents differ: {:?} vs {:?}", first.shape(), x.shape()),
            ));
        }
        channels += x.shape()[0];
    }
    let mut data = Vec::with_capacity(xs.iter().map(|x| x.len()).sum());
    for x in xs {
        data.extend_from_slice(x.data());
    }
    let mut shape = vec![channels];
    shape.extend_from_slice(tail);
    Tensor::new(shape, data)
}

/// Channels `start..start + len` of `x`.
pub fn slice_channels<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    if x.rank() == 0 || start + len > x.shape()[0] {
        return Err(shape_err(
            "slice_channels",
            format!("channels {start}..{} out of {:?}", start + len, x.shape()),
        ));
    }
    let plane: usize = x.shape()[1..].iter().product();
    let mut shape = x.shape().to_vec();
    shape[0] = len;
    Tensor::new(shape, x.data()[start * plane..(start + len) * plane].to_vec())
}

/// `[C, H, W] -> [C·f², H/f, W/f]`; channel `c·f² + i·f + j` holds the pixels
/// at row offset `i`, column offset `j` of each `f × f` cell.
pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3("pixel_unshuffle")?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(shape_err(
            "pixel_unshuffle",
            format!("spatial size {h}x{w} not divisible by {factor}"),
        ));
    }
    let (ho, wo) = (h / factor, w / factor);
    let f = factor;
    let src = x.data();
    let mut out = vec![T::ZERO; x.len()];
    for ch in 0..c {
        for i in 0..f {
            for j in 0..f {
                let oc = (ch * f + i) * f + j;
                for y in 0..ho {
                    for xx in 0..wo {
                        out[(oc * ho + y) * wo + xx] = src[(ch * h + y * f + i) * w + xx * f + j];
                    }
                }
            }
        }
    }
    Tensor::new([c * f * f, ho, wo], out)
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (cf, ho, wo) = x.dims3("pixel_shuffle")?;
    let f = factor;
    if f == 0 || cf % (f * f) != 0 {
        return Err(shape_err(
            "pixel_shuffle",
            format!("channels {cf} not divisible by {}", f * f),
        ));
    }
    let c = cf / (f * f);
    let (h, w) = (ho * f, wo * f);
    let src = x.data();
    let mut out = vec![T::ZERO; x.len()];
    for ch in 0..c {
        for i in 0..f {
            for j in 0..f {
                let ic = (ch * f + i) * f + j;
                for y in 0..ho {
                    for xx in 0..wo {
                        out[(ch * h + y * f + i) * w + xx * f + j] = src[(ic * ho + y) * wo + xx];
                    }
                }
            }
        }
    }
    Tensor::new([c, h, w], out)
}

/// Spatial mean of every channel of a `[C, H, W]` tensor.
pub fn global_avg_channels<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3("global_avg_channels")?;
    let hw = h * w;
    let inv = T::ONE / T::from_usize(hw);
    Tensor::new(
        [c],
        x.data()
            .chunks(hw)
            .map(|p| p.iter().fold(T::ZERO, |s, &v| s + v) * inv)
            .collect(),
    )
}
