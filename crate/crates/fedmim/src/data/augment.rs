//! Stochastic image augmentation: scale, crop, flip, rotate, colour jitter,
//! grayscale. Every step that draws randomness only draws when its knob is
//! active, so a disabled policy is a bitwise identity.

use rand::Rng;

use crate::data::ImageShape;
use crate::error::{ensure, Result};
use crate::numerics::tensor::Real;

/// Knobs for one augmentation pass. Output size is always the crop size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    /// Uniform scale factor range applied to both image dimensions.
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub crop_h: usize,
    pub crop_w: usize,
    pub flip_p: f64,
    /// Rotation is drawn uniformly from ±this many degrees (0 disables).
    pub rotate_deg: f64,
    /// Colour jitter strength: contrast and brightness offsets up to ±this.
    pub jitter: f64,
    pub grayscale_p: f64,
}

impl AugmentPolicy {
    /// The policy that returns every image unchanged.
    pub fn identity(shape: ImageShape) -> Self {
        AugmentPolicy {
            scale_lo: 1.0,
            scale_hi: 1.0,
            crop_h: shape.h,
            crop_w: shape.w,
            flip_p: 0.0,
            rotate_deg: 0.0,
            jitter: 0.0,
            grayscale_p: 0.0,
        }
    }

    pub fn validate(&self, shape: ImageShape) -> Result<()> {
        ensure!(
            0.0 < self.scale_lo && self.scale_lo <= self.scale_hi,
            "scale range [{}, {}] is invalid",
            self.scale_lo,
            self.scale_hi
        );
        ensure!(self.crop_h > 0 && self.crop_w > 0, "crop must be non-empty");
        let min_h = scaled_extent(shape.h, self.scale_lo);
        let min_w = scaled_extent(shape.w, self.scale_lo);
        ensure!(
            self.crop_h <= min_h && self.crop_w <= min_w,
            "crop {}×{} exceeds the smallest scaled image {}×{}",
            self.crop_h,
            self.crop_w,
            min_h,
            min_w
        );
        for (name, p) in [
            ("flip", self.flip_p),
            ("grayscale", self.grayscale_p),
        ] {
            ensure!((0.0..=1.0).contains(&p), "{name} probability {p} outside [0, 1]");
        }
        ensure!(self.rotate_deg >= 0.0, "rotation bound must be non-negative");
        ensure!(self.jitter >= 0.0, "jitter strength must be non-negative");
        Ok(())
    }
}

fn scaled_extent(extent: usize, scale: f64) -> usize {
    ((extent as f64 * scale).round() as usize).max(1)
}

/// Apply one random augmentation pass; output is `crop_h × crop_w × c`.
pub fn augment<F: Real>(
    image: &[F],
    shape: ImageShape,
    pol: &AugmentPolicy,
    rng: &mut impl Rng,
) -> Result<Vec<F>> {
    pol.validate(shape)?;
    ensure!(
        image.len() == shape.numel(),
        "image of {} values does not match shape {}×{}×{}",
        image.len(),
        shape.h,
        shape.w,
        shape.c
    );
    let c = shape.c;

    // Scale.
    let scale = if pol.scale_lo < pol.scale_hi {
        rng.random_range(pol.scale_lo..pol.scale_hi)
    } else {
        pol.scale_lo
    };
    let (sh, sw) = (scaled_extent(shape.h, scale), scaled_extent(shape.w, scale));
    let mut pixels: Vec<f64>;
    if (sh, sw) == (shape.h, shape.w) {
        pixels = image.iter().map(|&v| v.to_f64()).collect();
    } else {
        let src: Vec<f64> = image.iter().map(|&v| v.to_f64()).collect();
        pixels = resize_bilinear(&src, shape.h, shape.w, c, sh, sw);
    }

    // Rotate about the centre.
    if pol.rotate_deg > 0.0 {
        let angle = rng.random_range(-pol.rotate_deg..pol.rotate_deg).to_radians();
        pixels = rotate(&pixels, sh, sw, c, angle);
    }

    // Crop.
    let oy = if sh > pol.crop_h {
        rng.random_range(0..=sh - pol.crop_h)
    } else {
        0
    };
    let ox = if sw > pol.crop_w {
        rng.random_range(0..=sw - pol.crop_w)
    } else {
        0
    };
    if (sh, sw) != (pol.crop_h, pol.crop_w) {
        let mut cropped = Vec::with_capacity(pol.crop_h * pol.crop_w * c);
        for y in 0..pol.crop_h {
            let start = ((y + oy) * sw + ox) * c;
            cropped.extend_from_slice(&pixels[start..start + pol.crop_w * c]);
        }
        pixels = cropped;
    }
    let (h, w) = (pol.crop_h, pol.crop_w);

    // Horizontal flip.
    if pol.flip_p > 0.0 && rng.random_range(0.0..1.0) < pol.flip_p {
        for y in 0..h {
            for x in 0..w / 2 {
                for ch in 0..c {
                    pixels.swap((y * w + x) * c + ch, (y * w + (w - 1 - x)) * c + ch);
                }
            }
        }
    }

    // Colour jitter: contrast and brightness, then per-channel gain.
    if pol.jitter > 0.0 {
        let contrast = rng.random_range((1.0 - pol.jitter).max(0.0)..1.0 + pol.jitter);
        let brightness = rng.random_range(-pol.jitter..pol.jitter);
        let gains: Vec<f64> = (0..c)
            .map(|_| rng.random_range((1.0 - pol.jitter).max(0.0)..1.0 + pol.jitter))
            .collect();
        for (i, v) in pixels.iter_mut().enumerate() {
            *v = ((*v - 0.5) * contrast + 0.5 + brightness) * gains[i % c];
        }
    }

    // Grayscale collapse.
    if pol.grayscale_p > 0.0 && rng.random_range(0.0..1.0) < pol.grayscale_p && c > 1 {
        for p in 0..h * w {
            let mean = pixels[p * c..(p + 1) * c].iter().sum::<f64>() / c as f64;
            pixels[p * c..(p + 1) * c].fill(mean);
        }
    }

    Ok(pixels
        .into_iter()
        .map(|v| F::from_f64(v.clamp(0.0, 1.0)))
        .collect())
}

/// Resize with bilinear interpolation (half-pixel centre alignment).
fn resize_bilinear(src: &[f64], sh: usize, sw: usize, c: usize, dh: usize, dw: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dh * dw * c);
    for y in 0..dh {
        let sy = (y as f64 + 0.5) * sh as f64 / dh as f64 - 0.5;
        for x in 0..dw {
            let sx = (x as f64 + 0.5) * sw as f64 / dw as f64 - 0.5;
            for ch in 0..c {
                out.push(sample_bilinear(src, sh, sw, c, sy, sx, ch));
            }
        }
    }
    out
}

/// Rotate `angle` radians about the image centre; source reads are bilinear
/// with edge clamping.
fn rotate(src: &[f64], h: usize, w: usize, c: usize, angle: f64) -> Vec<f64> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin_a, cos_a) = angle.sin_cos();
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sy = cy + dy * cos_a - dx * sin_a;
            let sx = cx + dy * sin_a + dx * cos_a;
            for ch in 0..c {
                out.push(sample_bilinear(src, h, w, c, sy, sx, ch));
            }
        }
    }
    out
}

fn sample_bilinear(src: &[f64], h: usize, w: usize, c: usize, y: f64, x: f64, ch: usize) -> f64 {
    let clamp = |v: f64, hi: usize| v.clamp(0.0, (hi - 1) as f64);
    let (y, x) = (clamp(y, h), clamp(x, w));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}
