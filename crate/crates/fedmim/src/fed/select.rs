//! Per-round cohort sampling.

use rand::Rng;

use crate::error::{ensure, Result};

/// Draw `k` of `n` client ids uniformly without replacement.
///
/// The result is sorted ascending so that everything downstream — local
/// updates, the weighted merge, the metrics log — walks clients in one
/// canonical order. Determinism is the caller's obligation: hand this the
/// stream derived from the master seed and the round number.
pub fn select_clients<R: Rng>(n: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    ensure!(n >= 1, "need at least one client to sample from");
    ensure!(
        k >= 1 && k <= n,
        "cannot select a cohort of {k} from {n} clients"
    );
    let mut picked = rand::seq::index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}
