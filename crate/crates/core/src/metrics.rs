//! Luma-channel PSNR and SSIM.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, shape_err, Result};
use crate::image::Image;

/// Reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const PEAK: f64 = 255.0;

/// BT.601 luma on the 8-bit scale, `16 + 65.481 R + 128.553 G + 24.966 B`.
pub fn luma(img: &Image) -> Vec<f64> {
    let plane = img.width() * img.height();
    let d = img.tensor().data();
    (0..plane)
        .map(|i| {
            16.0 + 65.481 * d[i] as f64 + 128.553 * d[plane + i] as f64 + 24.966 * d[2 * plane + i] as f64
        })
        .collect()
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if !a.same_size(b) {
        return Err(shape_err(
            "metrics",
            alloc::format!("{}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height()),
        ));
    }
    Ok(())
}

/// PSNR from a mean squared error on the 8-bit scale, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * libm::log10(PEAK * PEAK / mse)).min(PSNR_CAP)
}

pub fn psnr_y(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let (ya, yb) = (luma(a), luma(b));
    let mse = ya.iter().zip(&yb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / ya.len() as f64;
    Ok(psnr_from_mse(mse))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = libm::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable valid-mode filtering of a `w × h` plane.
fn filter_valid(p: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all window positions that fit inside the image.
pub fn ssim_y(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(arg_err(
            "ssim_y",
            alloc::format!("{w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let (x, y) = (luma(a), luma(b));
    let g = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(a, b)| a * b).collect() };
    let mx = filter_valid(&x, w, h, &g);
    let my = filter_valid(&y, w, h, &g);
    let sxx = filter_valid(&prod(&x, &x), w, h, &g);
    let syy = filter_valid(&prod(&y, &y), w, h, &g);
    let sxy = filter_valid(&prod(&x, &y), w, h, &g);
    let c1 = (SSIM_K1 * PEAK) * (SSIM_K1 * PEAK);
    let c2 = (SSIM_K2 * PEAK) * (SSIM_K2 * PEAK);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}
