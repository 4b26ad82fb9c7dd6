//! RGB images with values in `[0, 1]`, stored planar as `[3, H, W]`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Tensor<f32>,
}

impl Image {
    /// Wraps a `[3, H, W]` tensor, clamping every value into `[0, 1]`.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match *t.shape() {
            [3, h, w] if h > 0 && w > 0 => Ok(Self {
                pixels: t.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }),
            }),
            _ => Err(shape_err(
                "image",
                format!("expected [3, H, W], got {:?}", t.shape()),
            )),
        }
    }

    /// A constant image.
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(arg_err("image", "dimensions must be at least 1"));
        }
        let plane = width * height;
        let mut data = alloc::vec![0.0; 3 * plane];
        for y in 0..height {
            for x in 0..width {
                let rgb = f(x, y);
                for c in 0..3 {
                    data[c * plane + y * width + x] = rgb[c];
                }
            }
        }
        Self::from_tensor(&Tensor::new([3, height, width], data)?)
    }

    /// Interleaved 8-bit RGB, row-major.
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 3 * width * height {
            return Err(shape_err(
                "image",
                format!("{} bytes for {width}x{height} RGB", bytes.len()),
            ));
        }
        Self::from_fn(width, height, |x, y| {
            let i = 3 * (y * width + x);
            [0, 1, 2].map(|c| bytes[i + c] as f32 / 255.0)
        })
    }

    /// Interleaved 8-bit RGB with round-to-nearest quantization.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (w, h) = (self.width(), self.height());
        let plane = w * h;
        let d = self.pixels.data();
        let mut out = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                out.push(libm::roundf(d[c * plane + i] * 255.0) as u8);
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.pixels
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.pixels
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        let (w, h) = (self.width(), self.height());
        self.pixels.data()[c * w * h + y * w + x]
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width() == other.width() && self.height() == other.height()
    }

    /// Mean absolute difference over all samples.
    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        if !self.same_size(other) {
            return Err(shape_err("image", "size mismatch"));
        }
        let (a, b) = (self.pixels.data(), other.pixels.data());
        let s: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum();
        Ok(s / a.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_and_quantizes() {
        let t = Tensor::new([3, 1, 2], alloc::vec![-1.0, 0.5, 2.0, 0.2, f32::NAN, 1.0]).unwrap();
        let img = Image::from_tensor(&t).unwrap();
        assert_eq!(img.tensor().data(), &[0.0, 0.5, 1.0, 0.2, 0.0, 1.0]);
        assert_eq!(img.to_rgb8(), alloc::vec![0, 255, 0, 128, 51, 255]);
    }

    #[test]
    fn rgb8_round_trip_is_exact() {
        let bytes: Vec<u8> = (0..3 * 5 * 4).map(|i| (i * 37 % 256) as u8).collect();
        let img = Image::from_rgb8(5, 4, &bytes).unwrap();
        assert_eq!(img.to_rgb8(), bytes);
        assert_eq!(img.get(0, 1, 0), bytes[3] as f32 / 255.0);
    }

    #[test]
    fn rejects_empty_and_bad_shapes() {
        assert!(Image::filled(0, 3, [0.0; 3]).is_err());
        assert!(Image::from_tensor(&Tensor::zeros([1, 2, 2])).is_err());
        assert!(Image::from_rgb8(2, 2, &[0; 11]).is_err());
    }
}
