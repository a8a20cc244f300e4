//! Class-conditional Dirichlet splits across clients, plus the per-client
//! labelled/unlabelled subsampling used to starve clients of labels.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::data::Dataset;
use crate::error::{ensure, Result};
use crate::numerics::tensor::Real;
use crate::seeds;

/// How to split a dataset across clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub clients: usize,
    /// Dirichlet concentration: large values approach an even split, small
    /// values concentrate whole classes on few clients.
    pub alpha: f64,
    pub seed: u64,
    /// Redraw the whole split (bounded retries) if any client ends up empty.
    pub resample_empty: bool,
}

impl PartitionSpec {
    pub fn new(clients: usize, alpha: f64, seed: u64) -> Self {
        PartitionSpec {
            clients,
            alpha,
            seed,
            resample_empty: false,
        }
    }
}

/// A realized split: disjoint per-client index lists covering the dataset,
/// plus the drawn per-class proportions behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    clients: Vec<Vec<usize>>,
    /// `proportions[j][k]`: drawn share of class `j` on client `k`; each row
    /// sums to 1.
    proportions: Vec<Vec<f64>>,
}

impl Partition {
    fn new(clients: Vec<Vec<usize>>, proportions: Vec<Vec<f64>>, total: usize) -> Result<Self> {
        let mut seen = vec![false; total];
        for indices in &clients {
            for &i in indices {
                ensure!(i < total, "index {i} outside the dataset");
                ensure!(!seen[i], "index {i} assigned to two clients");
                seen[i] = true;
            }
        }
        ensure!(
            seen.iter().all(|&s| s),
            "assignment does not cover the dataset"
        );
        for row in &proportions {
            let sum: f64 = row.iter().sum();
            ensure!(
                (sum - 1.0).abs() < 1e-9,
                "class proportions sum to {sum}, not 1"
            );
        }
        Ok(Partition {
            clients,
            proportions,
        })
    }

    /// Reassemble from explicit per-client index lists (manifest replay).
    /// Proportions are reconstructed from realized per-class counts.
    pub fn from_indices<F: Real>(clients: Vec<Vec<usize>>, ds: &Dataset<F>) -> Result<Self> {
        let mut proportions = vec![vec![0.0; clients.len()]; ds.num_classes()];
        for (k, indices) in clients.iter().enumerate() {
            for &i in indices {
                ensure!(i < ds.len(), "index {i} outside the dataset");
                proportions[ds.label(i)][k] += 1.0;
            }
        }
        for row in &mut proportions {
            let sum: f64 = row.iter().sum();
            ensure!(sum > 0.0, "a class has no instances");
            for p in row.iter_mut() {
                *p /= sum;
            }
        }
        Partition::new(clients, proportions, ds.len())
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client(&self, k: usize) -> &[usize] {
        &self.clients[k]
    }

    pub fn clients(&self) -> &[Vec<usize>] {
        &self.clients
    }

    pub fn proportions(&self) -> &[Vec<f64>] {
        &self.proportions
    }
}

/// Mean over classes of the largest single-client share — 1/N for a perfectly
/// even split, 1.0 when every class lives entirely on one client.
pub fn heterogeneity_score(part: &Partition) -> f64 {
    let rows = part.proportions();
    let sum: f64 = rows
        .iter()
        .map(|row| row.iter().cloned().fold(0.0, f64::max))
        .sum();
    sum / rows.len() as f64
}

/// Split `ds` across clients with per-class Dirichlet draws.
pub fn dirichlet_partition<F: Real>(ds: &Dataset<F>, spec: &PartitionSpec) -> Result<Partition> {
    ensure!(spec.clients >= 1, "need at least one client");
    ensure!(spec.alpha > 0.0, "concentration must be positive");
    let counts = ds.class_counts();
    for (j, &c) in counts.iter().enumerate() {
        ensure!(c > 0, "class {j} has no instances");
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for i in 0..ds.len() {
        by_class[ds.label(i)].push(i);
    }

    let attempts = if spec.resample_empty { 100 } else { 1 };
    let mut last = None;
    for attempt in 0..attempts {
        let mut clients: Vec<Vec<usize>> = vec![Vec::new(); spec.clients];
        let mut proportions = Vec::with_capacity(ds.num_classes());
        for (j, indices) in by_class.iter().enumerate() {
            let mut indices = indices.clone();
            let mut shuffle_rng = seeds::stream(
                spec.seed,
                &[seeds::domain::PARTITION_SHUFFLE, j as u64, attempt],
            );
            indices.shuffle(&mut shuffle_rng);

            let mut draw_rng =
                seeds::stream(spec.seed, &[seeds::domain::PARTITION, j as u64, attempt]);
            let p = dirichlet(spec.alpha, spec.clients, &mut draw_rng);
            let shares = largest_remainder(&p, indices.len());
            let mut cursor = 0;
            for (k, &share) in shares.iter().enumerate() {
                clients[k].extend(&indices[cursor..cursor + share]);
                cursor += share;
            }
            proportions.push(p);
        }
        if spec.resample_empty && clients.iter().any(|c| c.is_empty()) {
            last = Some((clients, proportions));
            continue;
        }
        for indices in &mut clients {
            indices.sort_unstable();
        }
        return Partition::new(clients, proportions, ds.len());
    }
    // Retries exhausted: keep the final draw rather than failing the run.
    let (mut clients, proportions) = last.expect("at least one attempt ran");
    for indices in &mut clients {
        indices.sort_unstable();
    }
    Partition::new(clients, proportions, ds.len())
}

/// One Dirichlet draw via normalized Gamma(α, 1) samples.
fn dirichlet(alpha: f64, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum <= 0.0 {
        // All draws underflowed (only plausible at extreme concentrations);
        // fall back to an even split rather than dividing by zero.
        return vec![1.0 / n as f64; n];
    }
    for d in &mut draws {
        *d /= sum;
    }
    draws
}

/// Integer shares of `total` proportional to `p`: floor everything, then hand
/// the leftover units to the largest fractional remainders (ties to the lower
/// index). Shares always sum to `total` exactly.
fn largest_remainder(p: &[f64], total: usize) -> Vec<usize> {
    let targets: Vec<f64> = p.iter().map(|&pk| pk * total as f64).collect();
    let mut shares: Vec<usize> = targets.iter().map(|&t| t.floor() as usize).collect();
    let assigned: usize = shares.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = targets[a] - targets[a].floor();
        let rb = targets[b] - targets[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let deficit = total.saturating_sub(assigned);
    for &k in order.iter().cycle().take(deficit) {
        shares[k] += 1;
    }
    // Floating-point slack can overshoot by a unit; take it back from the
    // smallest remainders that still hold anything.
    let mut excess = shares.iter().sum::<usize>().saturating_sub(total);
    for &k in order.iter().rev() {
        if excess == 0 {
            break;
        }
        if shares[k] > 0 {
            shares[k] -= 1;
            excess -= 1;
        }
    }
    shares
}

/// Per-client labelled/unlabelled index lists.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSplit {
    pub labeled: Vec<Vec<usize>>,
    pub unlabeled: Vec<Vec<usize>>,
}

/// Mark a label fraction of each client's data as labelled, stratified by
/// class: per client and class, round-half-up(fraction · count) indices keep
/// their label and the rest are treated as unlabelled.
pub fn subsample_labels<F: Real>(
    part: &Partition,
    ds: &Dataset<F>,
    fraction: f64,
    seed: u64,
) -> Result<LabelSplit> {
    ensure!(
        fraction > 0.0 && fraction <= 1.0,
        "label fraction {fraction} outside (0, 1]"
    );
    let mut labeled = Vec::with_capacity(part.num_clients());
    let mut unlabeled = Vec::with_capacity(part.num_clients());
    for (k, indices) in part.clients().iter().enumerate() {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
        for &i in indices {
            by_class[ds.label(i)].push(i);
        }
        let mut keep = Vec::new();
        let mut drop = Vec::new();
        for (j, mut class_indices) in by_class.into_iter().enumerate() {
            let take = (fraction * class_indices.len() as f64 + 0.5).floor() as usize;
            let mut rng = seeds::stream(
                seed,
                &[seeds::domain::LABEL_SPLIT, k as u64, j as u64],
            );
            class_indices.shuffle(&mut rng);
            drop.extend(class_indices.split_off(take));
            keep.extend(class_indices);
        }
        keep.sort_unstable();
        drop.sort_unstable();
        labeled.push(keep);
        unlabeled.push(drop);
    }
    Ok(LabelSplit { labeled, unlabeled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ImageShape, Split};

    /// A label-only dataset of 1×1 black images — partition logic never looks
    /// at pixels.
    fn label_dataset(per_class: usize, classes: usize) -> Dataset<f64> {
        let labels: Vec<usize> = (0..classes).flat_map(|j| vec![j; per_class]).collect();
        Dataset::new(
            ImageShape { h: 1, w: 1, c: 1 },
            classes,
            Split::Train,
            vec![0.0; labels.len()],
            labels,
        )
        .unwrap()
    }

    #[test]
    fn one_client_takes_everything() {
        let ds = label_dataset(10, 2);
        let part = dirichlet_partition(&ds, &PartitionSpec::new(1, 0.5, 3)).unwrap();
        assert_eq!(part.client(0).len(), 20);
        assert_eq!(part.proportions(), &[vec![1.0], vec![1.0]]);
    }

    #[test]
    fn every_split_is_a_disjoint_cover() {
        let ds = label_dataset(37, 3);
        for seed in 0..10 {
            for &alpha in &[0.5, 100.0] {
                let part = dirichlet_partition(&ds, &PartitionSpec::new(5, alpha, seed)).unwrap();
                let mut all: Vec<usize> =
                    part.clients().iter().flatten().cloned().collect();
                all.sort_unstable();
                assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn counts_match_an_independent_rounding_of_the_drawn_shares() {
        let ds = label_dataset(53, 3);
        let part = dirichlet_partition(&ds, &PartitionSpec::new(4, 0.7, 11)).unwrap();
        for (j, row) in part.proportions().iter().enumerate() {
            // Independent largest-remainder pass over the stored draw.
            let targets: Vec<f64> = row.iter().map(|p| p * 53.0).collect();
            let mut expect: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
            let mut rem: Vec<(usize, f64)> = targets
                .iter()
                .enumerate()
                .map(|(k, t)| (k, t - t.floor()))
                .collect();
            rem.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let mut left = 53 - expect.iter().sum::<usize>();
            for &(k, _) in &rem {
                if left == 0 {
                    break;
                }
                expect[k] += 1;
                left -= 1;
            }
            for k in 0..4 {
                let got = part.client(k).iter().filter(|&&i| ds.label(i) == j).count();
                assert_eq!(got, expect[k], "class {j}, client {k}");
            }
        }
    }

    #[test]
    fn high_concentration_splits_evenly() {
        let ds = label_dataset(1000, 2);
        for seed in 0..20 {
            let part = dirichlet_partition(&ds, &PartitionSpec::new(5, 100.0, seed)).unwrap();
            for k in 0..5 {
                for j in 0..2 {
                    let share =
                        part.client(k).iter().filter(|&&i| ds.label(i) == j).count() as f64 / 1000.0;
                    assert!(
                        (share - 0.2).abs() < 0.1,
                        "seed {seed}: client {k} holds {share} of class {j}"
                    );
                }
            }
        }
    }

    #[test]
    fn heterogeneity_decreases_with_concentration() {
        let ds = label_dataset(300, 3);
        let mean_and_se = |alpha: f64| {
            let scores: Vec<f64> = (0..20)
                .map(|seed| {
                    let part =
                        dirichlet_partition(&ds, &PartitionSpec::new(5, alpha, seed)).unwrap();
                    heterogeneity_score(&part)
                })
                .collect();
            let mean = scores.iter().sum::<f64>() / 20.0;
            let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / 19.0;
            (mean, (var / 20.0).sqrt(), scores)
        };
        let (m_half, se_half, s_half) = mean_and_se(0.5);
        let (m_one, se_one, _) = mean_and_se(1.0);
        let (m_hundred, se_hundred, s_hundred) = mean_and_se(100.0);
        let gap = |a: f64, b: f64, sa: f64, sb: f64| (a - b) / (sa * sa + sb * sb).sqrt();
        assert!(
            gap(m_half, m_one, se_half, se_one) > 3.0,
            "α=0.5 ({m_half:.3}) vs α=1 ({m_one:.3}) separation too small"
        );
        assert!(
            gap(m_one, m_hundred, se_one, se_hundred) > 3.0,
            "α=1 ({m_one:.3}) vs α=100 ({m_hundred:.3}) separation too small"
        );
        // And the skewed regime beats the even regime on every single seed.
        for (s, h) in s_half.iter().zip(&s_hundred) {
            assert!(s > h);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let ds = label_dataset(10, 2);
        assert!(dirichlet_partition(&ds, &PartitionSpec::new(3, 0.0, 0)).is_err());
        assert!(dirichlet_partition(&ds, &PartitionSpec::new(0, 1.0, 0)).is_err());
    }

    #[test]
    fn partitions_replay_per_seed() {
        let ds = label_dataset(40, 3);
        let spec = PartitionSpec::new(6, 0.5, 9);
        assert_eq!(
            dirichlet_partition(&ds, &spec).unwrap(),
            dirichlet_partition(&ds, &spec).unwrap()
        );
        let other = PartitionSpec::new(6, 0.5, 10);
        assert_ne!(
            dirichlet_partition(&ds, &spec).unwrap(),
            dirichlet_partition(&ds, &other).unwrap()
        );
    }

    #[test]
    fn resampling_avoids_empty_clients_when_asked() {
        let ds = label_dataset(8, 2);
        // Sixteen items over four clients at strong skew: empty clients are
        // routine, so hunt for a seed that produces one.
        let spec = (0..50)
            .map(|seed| PartitionSpec::new(4, 0.2, seed))
            .find(|spec| {
                let part = dirichlet_partition(&ds, spec).unwrap();
                part.clients().iter().any(|c| c.is_empty())
            })
            .expect("some seed yields an empty client");
        let resampled = dirichlet_partition(
            &ds,
            &PartitionSpec {
                resample_empty: true,
                ..spec
            },
        )
        .unwrap();
        assert!(resampled.clients().iter().all(|c| !c.is_empty()));
    }

    #[test]
    fn full_fraction_labels_everything() {
        let ds = label_dataset(15, 2);
        let part = dirichlet_partition(&ds, &PartitionSpec::new(3, 1.0, 2)).unwrap();
        let split = subsample_labels(&part, &ds, 1.0, 5).unwrap();
        assert!(split.unlabeled.iter().all(|u| u.is_empty()));
        let total: usize = split.labeled.iter().map(|l| l.len()).sum();
        assert_eq!(total, 30);
    }

    #[test]
    fn rounding_is_half_up_per_class() {
        let ds = label_dataset(10, 2);
        let part = dirichlet_partition(&ds, &PartitionSpec::new(1, 1.0, 0)).unwrap();
        let split = subsample_labels(&part, &ds, 0.3, 1).unwrap();
        // 10 per class, fraction 0.3 → exactly 3 labelled per class.
        assert_eq!(split.labeled[0].len(), 6);
        let split = subsample_labels(&part, &ds, 0.25, 1).unwrap();
        // 2.5 rounds half-up to 3.
        assert_eq!(split.labeled[0].len(), 6);
    }

    #[test]
    fn label_grid_totals_track_the_fraction() {
        let ds = label_dataset(3000, 3);
        let part = dirichlet_partition(&ds, &PartitionSpec::new(5, 100.0, 4)).unwrap();
        for fraction in [0.1, 0.3, 0.7, 1.0] {
            let split = subsample_labels(&part, &ds, fraction, 7).unwrap();
            let total: usize = split.labeled.iter().map(|l| l.len()).sum();
            let expect = fraction * 9000.0;
            assert!(
                (total as f64 - expect).abs() <= 8.0,
                "fraction {fraction}: {total} labelled, expected about {expect}"
            );
        }
    }

    #[test]
    fn labeled_histograms_stay_stratified() {
        let ds = label_dataset(97, 3);
        let part = dirichlet_partition(&ds, &PartitionSpec::new(4, 0.5, 13)).unwrap();
        let split = subsample_labels(&part, &ds, 0.4, 3).unwrap();
        for k in 0..4 {
            for j in 0..3 {
                let full = part.client(k).iter().filter(|&&i| ds.label(i) == j).count();
                let labeled = split.labeled[k].iter().filter(|&&i| ds.label(i) == j).count();
                assert!(
                    (labeled as f64 - 0.4 * full as f64).abs() <= 1.0,
                    "client {k} class {j}: {labeled} of {full}"
                );
            }
        }
        // Labelled and unlabelled tile the client exactly.
        for k in 0..4 {
            let mut union = split.labeled[k].clone();
            union.extend(&split.unlabeled[k]);
            union.sort_unstable();
            let mut expect = part.client(k).to_vec();
            expect.sort_unstable();
            assert_eq!(union, expect);
        }
    }

    #[test]
    fn out_of_range_fractions_are_rejected() {
        let ds = label_dataset(5, 2);
        let part = dirichlet_partition(&ds, &PartitionSpec::new(2, 1.0, 0)).unwrap();
        assert!(subsample_labels(&part, &ds, 0.0, 0).is_err());
        assert!(subsample_labels(&part, &ds, 1.2, 0).is_err());
    }
}
