//! Patch masking strategies for the self-supervised objectives.
//!
//! Both generators resolve the mask ratio to an exact patch count
//! (round-half-up), so every image in a batch hides the same number of
//! patches. The blockwise sampler unions random rectangles, which yields far
//! fewer connected components than uniform sampling at the same ratio.

use crate::error::{ensure, Error, Result};
use rand::Rng;

/// Smallest rectangle the blockwise sampler will draw, in patches.
const MIN_BLOCK_AREA: usize = 4;
/// Height/width ratio of a block is log-uniform within this bound.
const MAX_ASPECT: f64 = 3.0;

/// Which patches of one image are hidden from the encoder.
///
/// Both index lists are sorted ascending and partition `0..num_patches`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    num_patches: usize,
    masked: Vec<usize>,
    visible: Vec<usize>,
}

impl MaskPlan {
    /// Build a plan from an explicit masked set. An empty set is legal here
    /// (useful for probes); the generators below never produce one.
    pub fn new(num_patches: usize, mut masked: Vec<usize>) -> Result<Self> {
        ensure!(num_patches > 0, "mask plan needs at least one patch");
        masked.sort_unstable();
        for pair in masked.windows(2) {
            ensure!(pair[0] != pair[1], "patch {} masked twice", pair[0]);
        }
        if let Some(&last) = masked.last() {
            ensure!(
                last < num_patches,
                "masked patch {last} out of range for {num_patches} patches"
            );
        }
        let mut visible = Vec::with_capacity(num_patches - masked.len());
        let mut it = masked.iter().peekable();
        for i in 0..num_patches {
            if it.peek() == Some(&&i) {
                it.next();
            } else {
                visible.push(i);
            }
        }
        Ok(MaskPlan {
            num_patches,
            masked,
            visible,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.num_patches
    }

    pub fn num_masked(&self) -> usize {
        self.masked.len()
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    pub fn is_masked(&self, patch: usize) -> bool {
        self.masked.binary_search(&patch).is_ok()
    }
}

/// Resolve a mask ratio to an exact count: round-half-up, and reject plans
/// that would leave nothing masked or nothing visible.
fn mask_count(num_patches: usize, gamma: f64) -> Result<usize> {
    ensure!(
        gamma.is_finite() && gamma > 0.0 && gamma < 1.0,
        "mask ratio must lie strictly between 0 and 1, got {gamma}"
    );
    let count = (gamma * num_patches as f64).round() as usize;
    ensure!(
        count >= 1 && count < num_patches,
        "mask ratio {gamma} over {num_patches} patches resolves to {count} masked \
         patches, leaving nothing to train on"
    );
    Ok(count)
}

/// Hide a uniformly random subset of exactly round-half-up(γ·P) patches.
pub fn random_mask<R: Rng>(num_patches: usize, gamma: f64, rng: &mut R) -> Result<MaskPlan> {
    let count = mask_count(num_patches, gamma)?;
    let masked = rand::seq::index::sample(rng, num_patches, count).into_vec();
    MaskPlan::new(num_patches, masked)
}

/// Hide a union of random rectangles covering exactly round-half-up(γ·H·W)
/// patches of an H×W patch grid.
///
/// Each rectangle targets an area drawn uniformly from
/// `[MIN_BLOCK_AREA, remaining]` with a log-uniform aspect ratio, and is
/// placed uniformly. Patches a rectangle shares with earlier ones count once.
/// The last rectangle usually overshoots; its freshly covered patches are
/// kept in row-major order and the tail is dropped to land on the exact
/// count.
pub fn blockwise_mask<R: Rng>(
    grid_h: usize,
    grid_w: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<MaskPlan> {
    ensure!(grid_h > 0 && grid_w > 0, "patch grid must be non-empty");
    let num_patches = grid_h * grid_w;
    let target = mask_count(num_patches, gamma)?;

    let mut covered = vec![false; num_patches];
    let mut count = 0usize;
    let mut attempts = 0usize;
    let ln_aspect = MAX_ASPECT.ln();

    while count < target {
        attempts += 1;
        if attempts > 100 * num_patches {
            return Err(Error::internal(format!(
                "blockwise sampler failed to reach {target} patches on a \
                 {grid_h}x{grid_w} grid"
            )));
        }
        let remaining = target - count;
        let area_hi = remaining.max(MIN_BLOCK_AREA);
        let area = rng.random_range(MIN_BLOCK_AREA..=area_hi);
        let aspect = rng.random_range(-ln_aspect..=ln_aspect).exp();
        let bh = (((area as f64) * aspect).sqrt().round() as usize).clamp(1, grid_h);
        let bw = (((area as f64) / aspect).sqrt().round() as usize).clamp(1, grid_w);
        let top = rng.random_range(0..=grid_h - bh);
        let left = rng.random_range(0..=grid_w - bw);

        let mut fresh = Vec::new();
        for r in top..top + bh {
            for c in left..left + bw {
                let idx = r * grid_w + c;
                if !covered[idx] {
                    fresh.push(idx);
                }
            }
        }
        let take = fresh.len().min(remaining);
        for &idx in &fresh[..take] {
            covered[idx] = true;
        }
        count += take;
    }

    let masked = covered
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    MaskPlan::new(num_patches, masked)
}

/// Number of 4-connected components the masked set forms on the patch grid.
pub fn four_connected_components(
    grid_h: usize,
    grid_w: usize,
    plan: &MaskPlan,
) -> Result<usize> {
    ensure!(
        plan.num_patches() == grid_h * grid_w,
        "plan covers {} patches but the grid has {}",
        plan.num_patches(),
        grid_h * grid_w
    );
    let mut in_mask = vec![false; grid_h * grid_w];
    for &i in plan.masked() {
        in_mask[i] = true;
    }
    let mut seen = vec![false; grid_h * grid_w];
    let mut components = 0;
    let mut stack = Vec::new();
    for &start in plan.masked() {
        if seen[start] {
            continue;
        }
        components += 1;
        stack.push(start);
        seen[start] = true;
        while let Some(idx) = stack.pop() {
            let (r, c) = (idx / grid_w, idx % grid_w);
            let mut visit = |nr: usize, nc: usize| {
                let n = nr * grid_w + nc;
                if in_mask[n] && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            };
            if r > 0 {
                visit(r - 1, c);
            }
            if r + 1 < grid_h {
                visit(r + 1, c);
            }
            if c > 0 {
                visit(r, c - 1);
            }
            if c + 1 < grid_w {
                visit(r, c + 1);
            }
        }
    }
    Ok(components)
}
