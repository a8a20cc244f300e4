//! Classification metrics and per-client heterogeneity reporting.

use crate::data::{heterogeneity_score, Dataset, Partition};
use crate::error::{ensure, Result};
use crate::numerics::tensor::Real;

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<usize>,
    classes: usize,
}

impl ConfusionMatrix {
    pub fn from_predictions(preds: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        ensure!(!preds.is_empty(), "no predictions to evaluate");
        ensure!(
            preds.len() == labels.len(),
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        );
        let mut counts = vec![0usize; classes * classes];
        for (&p, &l) in preds.iter().zip(labels) {
            ensure!(p < classes && l < classes, "class id outside 0..{classes}");
            counts[l * classes + p] += 1;
        }
        Ok(ConfusionMatrix { counts, classes })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn at(&self, true_class: usize, predicted: usize) -> usize {
        self.counts[true_class * self.classes + predicted]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.classes).map(|j| self.at(j, j)).sum()
    }
}

/// Fraction of exact matches.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    ensure!(!preds.is_empty(), "no predictions to evaluate");
    ensure!(
        preds.len() == labels.len(),
        "{} predictions for {} labels",
        preds.len(),
        labels.len()
    );
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Per-class and macro-averaged F1.
#[derive(Debug, Clone, PartialEq)]
pub struct F1Report {
    /// `2·TP / (2·TP + FP + FN)` per class.
    pub per_class: Vec<f64>,
    pub macro_f1: f64,
    /// Classes that never appeared as either truth or prediction; their F1 is
    /// 1.0 by convention (nothing to get wrong), flagged so a reader can tell
    /// vacuous scores from earned ones.
    pub absent: Vec<bool>,
}

pub fn f1_per_class(preds: &[usize], labels: &[usize], classes: usize) -> Result<F1Report> {
    let cm = ConfusionMatrix::from_predictions(preds, labels, classes)?;
    let mut per_class = Vec::with_capacity(classes);
    let mut absent = Vec::with_capacity(classes);
    for j in 0..classes {
        let tp = cm.at(j, j);
        let fp: usize = (0..classes).filter(|&t| t != j).map(|t| cm.at(t, j)).sum();
        let fn_: usize = (0..classes).filter(|&p| p != j).map(|p| cm.at(j, p)).sum();
        if tp + fp + fn_ == 0 {
            per_class.push(1.0);
            absent.push(true);
        } else {
            per_class.push(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
            absent.push(false);
        }
    }
    let macro_f1 = per_class.iter().sum::<f64>() / classes as f64;
    Ok(F1Report {
        per_class,
        macro_f1,
        absent,
    })
}

/// Per-client class histograms plus the partition's skew score.
#[derive(Debug, Clone, PartialEq)]
pub struct HeterogeneityReport {
    /// `histograms[k][j]`: instances of class `j` held by client `k`.
    pub histograms: Vec<Vec<usize>>,
    /// Mean over classes of the largest single-client share.
    pub skew: f64,
}

impl HeterogeneityReport {
    /// Render as `client_id,class_id,count` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("client_id,class_id,count\n");
        for (k, histogram) in self.histograms.iter().enumerate() {
            for (j, &count) in histogram.iter().enumerate() {
                out.push_str(&format!("{k},{j},{count}\n"));
            }
        }
        out
    }
}

pub fn heterogeneity_report<F: Real>(part: &Partition, ds: &Dataset<F>) -> HeterogeneityReport {
    let histograms = part
        .clients()
        .iter()
        .map(|indices| {
            let mut histogram = vec![0usize; ds.num_classes()];
            for &i in indices {
                histogram[ds.label(i)] += 1;
            }
            histogram
        })
        .collect();
    HeterogeneityReport {
        histograms,
        skew: heterogeneity_score(part),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{dirichlet_partition, ImageShape, PartitionSpec, Split};
    use crate::seeds;
    use rand::Rng;

    #[test]
    fn accuracy_counts_exact_matches() {
        assert_eq!(accuracy(&[1, 2, 0], &[1, 2, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 0, 1], &[1, 0, 1, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn accuracy_equals_the_confusion_trace() {
        let mut rng = seeds::stream(1, &[]);
        let labels: Vec<usize> = (0..200).map(|_| rng.random_range(0..4)).collect();
        let preds: Vec<usize> = (0..200).map(|_| rng.random_range(0..4)).collect();
        let cm = ConfusionMatrix::from_predictions(&preds, &labels, 4).unwrap();
        assert_eq!(cm.total(), 200);
        assert_eq!(
            accuracy(&preds, &labels).unwrap(),
            cm.trace() as f64 / cm.total() as f64
        );
    }

    #[test]
    fn f1_hand_case() {
        // Class 0: TP=2, FP=1, FN=1 → 2/3. Class 1: TP=1, FP=1, FN=1 → 1/2.
        let labels = [0, 0, 0, 1, 1];
        let preds = [0, 0, 1, 0, 1];
        let report = f1_per_class(&preds, &labels, 2).unwrap();
        assert!((report.per_class[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((report.per_class[1] - 0.5).abs() < 1e-15);
        assert!((report.macro_f1 - (2.0 / 3.0 + 0.5) / 2.0).abs() < 1e-15);
        assert_eq!(report.absent, vec![false, false]);
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let labels = [0, 1, 2, 1, 0];
        let report = f1_per_class(&labels, &labels, 3).unwrap();
        assert_eq!(report.per_class, vec![1.0; 3]);
        assert_eq!(report.macro_f1, 1.0);
    }

    #[test]
    fn absent_classes_are_vacuously_perfect_and_flagged() {
        let labels = [0, 0, 1];
        let preds = [0, 1, 1];
        let report = f1_per_class(&preds, &labels, 3).unwrap();
        assert_eq!(report.per_class[2], 1.0);
        assert_eq!(report.absent, vec![false, false, true]);
    }

    #[test]
    fn f1_matches_a_brute_force_recount() {
        let mut rng = seeds::stream(2, &[]);
        for _ in 0..100 {
            let n = rng.random_range(1..40);
            let classes = rng.random_range(2..6);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let report = f1_per_class(&preds, &labels, classes).unwrap();
            for j in 0..classes {
                // Independent per-class tallies straight off the raw lists.
                let tp = preds
                    .iter()
                    .zip(&labels)
                    .filter(|&(&p, &l)| p == j && l == j)
                    .count();
                let fp = preds
                    .iter()
                    .zip(&labels)
                    .filter(|&(&p, &l)| p == j && l != j)
                    .count();
                let fn_ = preds
                    .iter()
                    .zip(&labels)
                    .filter(|&(&p, &l)| p != j && l == j)
                    .count();
                let expect = if tp + fp + fn_ == 0 {
                    1.0
                } else {
                    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
                };
                assert_eq!(report.per_class[j], expect);
            }
        }
    }

    #[test]
    fn macro_f1_survives_class_relabeling() {
        let mut rng = seeds::stream(3, &[]);
        let labels: Vec<usize> = (0..60).map(|_| rng.random_range(0..4)).collect();
        let preds: Vec<usize> = (0..60).map(|_| rng.random_range(0..4)).collect();
        let perm = [2usize, 0, 3, 1];
        let base = f1_per_class(&preds, &labels, 4).unwrap();
        let permuted = f1_per_class(
            &preds.iter().map(|&p| perm[p]).collect::<Vec<_>>(),
            &labels.iter().map(|&l| perm[l]).collect::<Vec<_>>(),
            4,
        )
        .unwrap();
        assert!((base.macro_f1 - permuted.macro_f1).abs() < 1e-12);
        for j in 0..4 {
            assert_eq!(base.per_class[j], permuted.per_class[perm[j]]);
        }
    }

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
    fn single_client_skew_is_total() {
        let ds = label_dataset(6, 2);
        let part = dirichlet_partition(&ds, &PartitionSpec::new(1, 1.0, 0)).unwrap();
        let report = heterogeneity_report(&part, &ds);
        assert_eq!(report.skew, 1.0);
        assert_eq!(report.histograms, vec![vec![6, 6]]);
    }

    #[test]
    fn balanced_split_skew_is_one_over_clients() {
        let ds = label_dataset(25, 2);
        // Hand-build an exactly even 5-way split: client k takes every 5th
        // index, which hits each class 5 times.
        let clients: Vec<Vec<usize>> = (0..5)
            .map(|k| (0..50).filter(|i| i % 5 == k).collect())
            .collect();
        let part = Partition::from_indices(clients, &ds).unwrap();
        let report = heterogeneity_report(&part, &ds);
        assert_eq!(report.skew, 0.2);
    }

    #[test]
    fn histograms_conserve_class_totals() {
        let ds = label_dataset(31, 3);
        let part = dirichlet_partition(&ds, &PartitionSpec::new(4, 0.5, 5)).unwrap();
        let report = heterogeneity_report(&part, &ds);
        for j in 0..3 {
            let total: usize = report.histograms.iter().map(|h| h[j]).sum();
            assert_eq!(total, 31);
        }
        let csv = report.to_csv();
        assert!(csv.starts_with("client_id,class_id,count\n"));
        assert_eq!(csv.lines().count(), 1 + 4 * 3);
    }
}
