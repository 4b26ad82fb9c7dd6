//! PNG and binary PPM (P6) images.

use std::path::Path;

use drsformer_core::image::Image;
use image::{ImageFormat, RgbImage};

use crate::error::{read, write, Error, Result};

/// Decodes a PNG or P6 file, recognized by content rather than extension.
pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = read(path)?;
    decode(&bytes).map_err(|d| Error::format(path, d))
}

fn decode(bytes: &[u8]) -> Result<Image, String> {
    let format = if bytes.starts_with(b"\x89PNG") {
        ImageFormat::Png
    } else if bytes.starts_with(b"P6") {
        ImageFormat::Pnm
    } else {
        return Err("unsupported format (expected PNG or binary PPM P6)".into());
    };
    let img = image::load_from_memory_with_format(bytes, format).map_err(|e| e.to_string())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().bytes_per_pixel() / img.color().channel_count() == 1 {
        Image::from_rgb8(w, h, img.to_rgb8().as_raw()).map_err(|e| e.to_string())
    } else {
        let f = img.to_rgb32f();
        Image::from_fn(w, h, |x, y| f.get_pixel(x as u32, y as u32).0).map_err(|e| e.to_string())
    }
}

fn rgb8(image: &Image) -> RgbImage {
    RgbImage::from_raw(image.width() as u32, image.height() as u32, image.to_rgb8())
        .expect("buffer matches dimensions")
}

fn encode(image: &Image, format: ImageFormat) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    rgb8(image)
        .write_to(&mut out, format)
        .expect("encoding to memory does not fail");
    out.into_inner()
}

/// Writes a P6 file with maxval 255.
pub fn save_ppm(image: &Image, path: &Path) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    bytes.extend_from_slice(&image.to_rgb8());
    write(path, &bytes)
}

pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    write(path, &encode(image, ImageFormat::Png))
}

/// Chooses the encoder from the extension: `.ppm` or `.png`.
pub fn save_image(image: &Image, path: &Path) -> Result<()> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("ppm") => save_ppm(image, path),
        Some("png") => save_png(image, path),
        _ => Err(Error::format(path, "output extension must be .ppm or .png")),
    }
}

/// Whether the path looks like an image this module reads.
pub fn is_image_path(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("ppm" | "png")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_white_pixel() {
        let mut bytes = b"P6 1 1 255\n".to_vec();
        bytes.extend([255, 255, 255]);
        let img = decode(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (1, 1));
        assert_eq!(img.tensor().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn truncated_and_unknown_inputs_fail() {
        assert!(decode(b"P6 2 2 255\n\x00\x00").is_err());
        assert!(decode(b"GIF89a").unwrap_err().contains("unsupported"));
        let png = encode(&Image::filled(4, 4, [0.5; 3]).unwrap(), ImageFormat::Png);
        assert!(decode(&png[..png.len() / 2]).is_err());
    }
}
