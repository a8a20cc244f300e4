//! Datasets and everything that shapes them: synthetic image generation,
//! non-IID partitioning across clients, label-fraction subsampling, image
//! augmentation, and the on-disk container format.

mod augment;
mod container;
mod partition;
mod synth;

pub use augment::{augment, AugmentPolicy};
pub(crate) use container::VERSION as CONTAINER_VERSION;
pub use container::{
    load_images, load_labels, load_manifest, save_images, save_labels, save_manifest,
};
pub use partition::{
    dirichlet_partition, heterogeneity_score, subsample_labels, LabelSplit, Partition,
    PartitionSpec,
};
pub use synth::{synth_dataset, SynthOutput, SynthSpec};

use crate::error::{ensure, Result};
use crate::numerics::tensor::Real;

/// Which side of the train/test boundary a dataset sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Height, width, and channel count of every image in a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl ImageShape {
    pub fn numel(&self) -> usize {
        self.h * self.w * self.c
    }
}

/// An immutable labelled image collection.
///
/// Images are stored flat, one `h·w·c` run per image with channels innermost,
/// every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F: Real> {
    shape: ImageShape,
    num_classes: usize,
    split: Split,
    images: Vec<F>,
    labels: Vec<usize>,
}

impl<F: Real> Dataset<F> {
    pub fn new(
        shape: ImageShape,
        num_classes: usize,
        split: Split,
        images: Vec<F>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        ensure!(shape.numel() > 0, "image extents must be positive");
        ensure!(num_classes >= 2, "need at least two classes");
        ensure!(
            images.len() == labels.len() * shape.numel(),
            "{} pixel values do not hold {} images of {} pixels each",
            images.len(),
            labels.len(),
            shape.numel()
        );
        for (i, &label) in labels.iter().enumerate() {
            ensure!(
                label < num_classes,
                "label {label} of image {i} is outside 0..{num_classes}"
            );
        }
        for &v in &images {
            let v = v.to_f64();
            ensure!((0.0..=1.0).contains(&v), "pixel value {v} outside [0, 1]");
        }
        Ok(Dataset {
            shape,
            num_classes,
            split,
            images,
            labels,
        })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[F] {
        let n = self.shape.numel();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Instance counts per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &label in &self.labels {
            counts[label] += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SHAPE: ImageShape = ImageShape { h: 2, w: 2, c: 1 };

    #[test]
    fn construction_checks_lengths_labels_and_range() {
        let ok = Dataset::new(SHAPE, 2, Split::Train, vec![0.5f64; 8], vec![0, 1]);
        assert_eq!(ok.unwrap().len(), 2);
        // Pixel buffer not a multiple of the image size.
        assert!(Dataset::new(SHAPE, 2, Split::Train, vec![0.5f64; 7], vec![0, 1]).is_err());
        // Label out of range.
        assert!(Dataset::new(SHAPE, 2, Split::Train, vec![0.5f64; 8], vec![0, 2]).is_err());
        // Pixel out of range.
        assert!(Dataset::new(SHAPE, 2, Split::Train, vec![1.5f64; 8], vec![0, 1]).is_err());
    }

    #[test]
    fn accessors_slice_the_right_image() {
        let images = vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
        let ds = Dataset::new(SHAPE, 2, Split::Test, images, vec![1, 0]).unwrap();
        assert_eq!(ds.image(1), &[0.4, 0.5, 0.6, 0.7]);
        assert_eq!(ds.label(0), 1);
        assert_eq!(ds.class_counts(), vec![1, 1]);
    }
}
