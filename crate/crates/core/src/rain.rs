//! Procedural clean scenes and additive synthetic rain.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

/// Streak sampling parameters.
///
/// Every image draws one base direction from `angle`; each streak then
/// deviates from it by at most [`ANGLE_JITTER`] degrees.
#[derive(Clone, Debug, PartialEq)]
pub struct RainParams {
    /// Streaks per thousand pixels.
    pub density: f64,
    /// Streak length in pixels.
    pub length: (f64, f64),
    /// Degrees from vertical.
    pub angle: (f64, f64),
    /// Streak width in pixels.
    pub width: (f64, f64),
    /// Peak added brightness.
    pub intensity: (f64, f64),
    pub blur_sigma: f64,
    pub seed: u64,
}

/// Per-streak deviation from the image's base direction, in degrees.
pub const ANGLE_JITTER: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RainPreset {
    Light,
    Heavy,
}

impl RainPreset {
    pub fn params(self, seed: u64) -> RainParams {
        match self {
            RainPreset::Light => RainParams {
                density: 3.0,
                length: (6.0, 16.0),
                angle: (-20.0, 20.0),
                width: (0.8, 1.4),
                intensity: (0.25, 0.55),
                blur_sigma: 0.6,
                seed,
            },
            RainPreset::Heavy => RainParams {
                density: 9.0,
                length: (10.0, 28.0),
                angle: (-25.0, 25.0),
                width: (1.0, 2.2),
                intensity: (0.35, 0.75),
                blur_sigma: 0.8,
                seed,
            },
        }
    }
}

impl core::str::FromStr for RainPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "light" => Ok(Self::Light),
            "heavy" => Ok(Self::Heavy),
            _ => Err(Error::Config(format!(
                "unknown rain preset {s:?}, expected light or heavy"
            ))),
        }
    }
}

fn range_ok(name: &str, (lo, hi): (f64, f64), min: f64, max: f64) -> Result<()> {
    if lo.is_finite() && hi.is_finite() && min <= lo && lo <= hi && hi <= max {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "rain {name} range [{lo}, {hi}] must lie in [{min}, {max}] in order"
        )))
    }
}

impl RainParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(Error::Config(format!(
                "rain density {} must be positive",
                self.density
            )));
        }
        range_ok("length", self.length, f64::MIN_POSITIVE, f64::MAX)?;
        range_ok("angle", self.angle, -90.0, 90.0)?;
        range_ok("width", self.width, f64::MIN_POSITIVE, f64::MAX)?;
        range_ok("intensity", self.intensity, 0.0, 1.0)?;
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "blur sigma {} must be non-negative",
                self.blur_sigma
            )));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Grey-level rain layer for a `w × h` image, before blurring.
fn streak_layer(w: usize, h: usize, p: &RainParams, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut layer = vec![0.0f32; w * h];
    let count = libm::round(p.density * (w * h) as f64 / 1000.0) as usize;
    let base = uniform(rng, p.angle);
    for _ in 0..count {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let len = uniform(rng, p.length);
        let theta = (base + rng.random_range(-ANGLE_JITTER..=ANGLE_JITTER)).to_radians();
        let width = uniform(rng, p.width);
        let amp = uniform(rng, p.intensity) as f32;
        let (dx, dy) = (libm::sin(theta) * len / 2.0, libm::cos(theta) * len / 2.0);
        let (x0, y0, x1, y1) = (cx - dx, cy - dy, cx + dx, cy + dy);
        let reach = width / 2.0 + 1.0;
        let bx0 = libm::floor(x0.min(x1) - reach).max(0.0) as usize;
        let by0 = libm::floor(y0.min(y1) - reach).max(0.0) as usize;
        let bx1 = (libm::ceil(x0.max(x1) + reach) as usize).min(w);
        let by1 = (libm::ceil(y0.max(y1) + reach) as usize).min(h);
        let (vx, vy) = (x1 - x0, y1 - y0);
        let vv = vx * vx + vy * vy;
        for py in by0..by1 {
            for px in bx0..bx1 {
                let (qx, qy) = (px as f64 + 0.5 - x0, py as f64 + 0.5 - y0);
                let t = if vv > 0.0 {
                    ((qx * vx + qy * vy) / vv).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (ex, ey) = (qx - t * vx, qy - t * vy);
                let d = libm::sqrt(ex * ex + ey * ey);
                let cover = (width / 2.0 + 0.5 - d).clamp(0.0, 1.0) as f32;
                let v = &mut layer[py * w + px];
                *v = v.max(amp * cover);
            }
        }
    }
    layer
}

/// Separable Gaussian blur with zero padding and a `⌈3σ⌉` radius.
pub fn gaussian_blur(plane: &[f32], w: usize, h: usize, sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let r = libm::ceil(3.0 * sigma) as isize;
    let mut k: Vec<f32> = (-r..=r)
        .map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma)) as f32)
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0f32; w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let o = j as isize - r;
                    let (sx, sy) = if horizontal { (x + o, y) } else { (x, y + o) };
                    if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                        acc += kv * src[sy as usize * w + sx as usize];
                    }
                }
                out[y as usize * w + x as usize] = acc;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

/// Adds a blurred streak layer to `clean` and clamps to `[0, 1]`.
pub fn synth_rain(clean: &Image, params: &RainParams) -> Result<Image> {
    params.validate()?;
    let (w, h) = (clean.width(), clean.height());
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let layer = gaussian_blur(&streak_layer(w, h, params, &mut rng), w, h, params.blur_sigma);
    let plane = w * h;
    let mut t = clean.tensor().clone();
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v += layer[i % plane];
    }
    Image::from_tensor(&t)
}

/// A smooth synthetic scene: a two-colour gradient, a few soft-edged shapes
/// and a faint low-frequency texture, kept inside `[0.05, 0.85]`.
pub fn procedural_scene(width: usize, height: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| [0, 1, 2].map(|_| rng.random_range(0.1f32..0.8));
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let dir = rng.random_range(0.0..core::f32::consts::TAU);
    let (gx, gy) = (libm::cosf(dir), libm::sinf(dir));
    struct Shape {
        cx: f32,
        cy: f32,
        rx: f32,
        ry: f32,
        boxy: bool,
        color: [f32; 3],
        alpha: f32,
    }
    let n = rng.random_range(3..=6);
    let (wf, hf) = (width as f32, height as f32);
    let shapes: Vec<Shape> = (0..n)
        .map(|_| Shape {
            cx: rng.random_range(0.0..wf),
            cy: rng.random_range(0.0..hf),
            rx: rng.random_range(0.08..0.35) * wf,
            ry: rng.random_range(0.08..0.35) * hf,
            boxy: rng.random_bool(0.5),
            color: color(&mut rng),
            alpha: rng.random_range(0.5..0.9),
        })
        .collect();
    let (fx, fy, phase) = (
        rng.random_range(0.05f32..0.25),
        rng.random_range(0.05f32..0.25),
        rng.random_range(0.0..core::f32::consts::TAU),
    );
    let scale = wf.max(hf);
    Image::from_fn(width, height, |x, y| {
        let (xf, yf) = (x as f32 + 0.5, y as f32 + 0.5);
        let t = (((xf - wf / 2.0) * gx + (yf - hf / 2.0) * gy) / scale + 0.5).clamp(0.0, 1.0);
        let mut px = [0, 1, 2].map(|c| c0[c] * (1.0 - t) + c1[c] * t);
        for s in &shapes {
            let (u, v) = ((xf - s.cx) / s.rx, (yf - s.cy) / s.ry);
            let d = if s.boxy {
                u.abs().max(v.abs())
            } else {
                libm::sqrtf(u * u + v * v)
            };
            // Soft edge about two pixels wide.
            let edge = 2.0 / s.rx.min(s.ry);
            let a = s.alpha * ((1.0 - d) / edge + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                px[c] = px[c] * (1.0 - a) + s.color[c] * a;
            }
        }
        let tex = 0.04 * libm::sinf(fx * xf + phase) * libm::cosf(fy * yf);
        px.map(|v| (v + tex).clamp(0.05, 0.85))
    })
}
