//! Flattening images into patch rows and back.
//!
//! Images are `[H, W, C]` row-major. A patch row holds its pixels row-major
//! with channels innermost, so patch `(gr, gc)` offset `(pr, pc, ch)` lands at
//! `(pr·p + pc)·C + ch`. Patches themselves are ordered row-major over the
//! patch grid.

use crate::error::{ensure, Result};
use crate::numerics::tensor::Real;

/// Split an `[h, w, c]` image into `[P, p²·c]` patch rows.
pub fn patchify<F: Real>(
    image: &[F],
    h: usize,
    w: usize,
    c: usize,
    patch: usize,
) -> Result<Vec<F>> {
    ensure!(patch > 0, "patch side must be positive");
    ensure!(
        h % patch == 0 && w % patch == 0,
        "{h}x{w} image is not divisible into {patch}x{patch} patches"
    );
    ensure!(
        image.len() == h * w * c,
        "image buffer holds {} values, expected {}",
        image.len(),
        h * w * c
    );
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(image.len());
    for gr in 0..gh {
        for gc in 0..gw {
            for pr in 0..patch {
                let row = gr * patch + pr;
                let col0 = gc * patch;
                let start = (row * w + col0) * c;
                out.extend_from_slice(&image[start..start + patch * c]);
            }
        }
    }
    Ok(out)
}

/// Reassemble `[P, p²·c]` patch rows into an `[h, w, c]` image.
pub fn unpatchify<F: Real>(
    patches: &[F],
    h: usize,
    w: usize,
    c: usize,
    patch: usize,
) -> Result<Vec<F>> {
    ensure!(patch > 0, "patch side must be positive");
    ensure!(
        h % patch == 0 && w % patch == 0,
        "{h}x{w} image is not divisible into {patch}x{patch} patches"
    );
    ensure!(
        patches.len() == h * w * c,
        "patch buffer holds {} values, expected {}",
        patches.len(),
        h * w * c
    );
    let (gh, gw) = (h / patch, w / patch);
    let patch_dim = patch * patch * c;
    let mut out = vec![F::zero(); h * w * c];
    for gr in 0..gh {
        for gc in 0..gw {
            let p = (gr * gw + gc) * patch_dim;
            for pr in 0..patch {
                let row = gr * patch + pr;
                let col0 = gc * patch;
                let dst = (row * w + col0) * c;
                let src = p + pr * patch * c;
                out[dst..dst + patch * c].copy_from_slice(&patches[src..src + patch * c]);
            }
        }
    }
    Ok(out)
}
