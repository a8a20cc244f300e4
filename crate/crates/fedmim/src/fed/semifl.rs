//! Consistency training for the client that holds only unlabeled images.
//!
//! Each original image is labeled by the current model itself — argmax over
//! the classifier's logits, computed in a detached side graph — and the
//! training loss is the cross-entropy of an augmented view against that
//! pseudo-label. Gradients therefore flow only through the augmented branch;
//! the labelling pass contributes targets, never derivatives. An optional
//! confidence threshold drops images the labeler is unsure about, so early
//! in training the client teaches itself from its best guesses only — or,
//! when none qualify, from nothing at all.

use rand_chacha::ChaCha8Rng;

use crate::data::{augment, AugmentPolicy, ImageShape};
use crate::error::{ensure, Result};
use crate::model::{classify, encode_full, patchify, BoundParams, ModelConfig, ModelParams};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::tensor::Real;

/// Index of the largest value, first one on ties.
pub(crate) fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Classify each original image with `labeler` and keep the argmax.
///
/// The forward pass runs in its own graph whose parameters are constants, so
/// no gradient can ever reach it from a training loss.
pub fn pseudo_labels<F: Real>(
    mcfg: &ModelConfig,
    labeler: &ModelParams<F>,
    images: &[&[F]],
) -> Result<Vec<usize>> {
    Ok(scored_labels(mcfg, labeler, images)?
        .into_iter()
        .map(|(label, _)| label)
        .collect())
}

/// Argmax label plus its softmax probability, per image, in a detached graph.
fn scored_labels<F: Real>(
    mcfg: &ModelConfig,
    labeler: &ModelParams<F>,
    images: &[&[F]],
) -> Result<Vec<(usize, f64)>> {
    let mut side = Graph::new();
    let nodes = labeler
        .tensors()
        .iter()
        .map(|t| side.constant(t.shape().to_vec(), t.data().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let frozen = BoundParams::from_leaves(labeler, nodes)?;
    let mut scored = Vec::with_capacity(images.len());
    for &image in images {
        let patches = patchify(image, mcfg.image_h, mcfg.image_w, mcfg.channels, mcfg.patch)?;
        let p = side.constant(vec![mcfg.num_patches(), mcfg.patch_dim()], patches)?;
        let enc = encode_full(&mut side, &frozen, mcfg, p)?;
        let logits = classify(&mut side, &frozen, enc)?;
        let probs = side.softmax(logits)?;
        let row = side.data(probs);
        let best = argmax(row);
        let top = row[best];
        scored.push((best, top.to_f64()));
    }
    Ok(scored)
}

/// Mean cross-entropy of augmented views against the pseudo-labels of the
/// originals, keeping only images whose top-class probability reaches
/// `threshold` (zero keeps them all). Returns the loss node in `g` together
/// with the labels actually trained on, or `None` when nothing qualifies.
///
/// `rng` draws one view per original image in batch order whether or not the
/// image survives the filter, so the stream position after a batch depends
/// only on the batch size, never on what the labeler thought of it.
#[allow(clippy::too_many_arguments)]
pub fn consistency_loss<F: Real>(
    g: &mut Graph<F>,
    bp: &BoundParams<'_, F>,
    mcfg: &ModelConfig,
    labeler: &ModelParams<F>,
    images: &[&[F]],
    shape: ImageShape,
    policy: &AugmentPolicy,
    threshold: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(NodeId, Vec<usize>)>> {
    ensure!(!images.is_empty(), "consistency batch is empty");
    ensure!(
        shape.h == mcfg.image_h && shape.w == mcfg.image_w && shape.c == mcfg.channels,
        "image shape {}x{}x{} does not match the model's {}x{}x{}",
        shape.h,
        shape.w,
        shape.c,
        mcfg.image_h,
        mcfg.image_w,
        mcfg.channels
    );
    let scored = scored_labels(mcfg, labeler, images)?;
    let mut rows = Vec::with_capacity(images.len());
    let mut labels = Vec::with_capacity(images.len());
    for (&image, (label, top)) in images.iter().zip(scored) {
        let view = augment(image, shape, policy, rng)?;
        if top < threshold {
            continue;
        }
        let patches = patchify(&view, mcfg.image_h, mcfg.image_w, mcfg.channels, mcfg.patch)?;
        let p = g.constant(vec![mcfg.num_patches(), mcfg.patch_dim()], patches)?;
        let enc = encode_full(g, bp, mcfg, p)?;
        rows.push(classify(g, bp, enc)?);
        labels.push(label);
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let cat = g.concat_rows(&rows)?;
    let loss = g.cross_entropy_rows(cat, &labels)?;
    Ok(Some((loss, labels)))
}
