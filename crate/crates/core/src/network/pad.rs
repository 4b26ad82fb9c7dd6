use super::model::{Model, SIZE_MULTIPLE};
use crate::error::Result;
use crate::image::Image;
use crate::tensor::Tensor;

/// Mirror index without repeating the edge sample, for any extent.
fn fold(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Extends `[C, H, W]` to the next multiples of `multiple` by reflection.
pub fn reflect_pad(t: &Tensor<f32>, multiple: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = t.dims3("reflect_pad")?;
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    Ok(Tensor::from_fn([c, ph, pw], |i| {
        let (ch, y, x) = (i / (ph * pw), i / pw % ph, i % pw);
        t.data()[ch * h * w + fold(y, h) * w + fold(x, w)]
    }))
}

/// The top-left `h × w` window of `[C, H, W]`.
pub fn crop_top_left(t: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (c, th, tw) = t.dims3("crop")?;
    if h > th || w > tw {
        return Err(crate::error::arg_err("crop", "window larger than tensor"));
    }
    Ok(Tensor::from_fn([c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), i / w % h, i % w);
        t.data()[ch * th * tw + y * tw + x]
    }))
}

/// Derains an image of any size: pads by reflection, runs the network,
/// crops back and clamps to `[0, 1]`.
pub fn restore(model: &Model<f32>, rainy: &Image) -> Result<Image> {
    let (h, w) = (rainy.height(), rainy.width());
    let padded = reflect_pad(rainy.tensor(), SIZE_MULTIPLE)?;
    let out = model.derain(&padded)?;
    Image::from_tensor(&crop_top_left(&out, h, w)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_reflects() {
        let idx: alloc::vec::Vec<_> = (0..9).map(|i| fold(i, 4)).collect();
        assert_eq!(idx, [0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(fold(5, 1), 0);
    }

    #[test]
    fn pad_then_crop_round_trips() {
        let t = Tensor::from_fn([3, 67, 100], |i| i as f32);
        let p = reflect_pad(&t, 8).unwrap();
        assert_eq!(p.shape(), &[3, 72, 104]);
        assert_eq!(p.data()[67 * 104], t.data()[65 * 100]);
        assert_eq!(crop_top_left(&p, 67, 100).unwrap(), t);
    }
}
