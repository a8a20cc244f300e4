//! Supervised classification on top of the encoder.
//!
//! Fine-tuning and evaluation run the encoder over the full, unmasked patch
//! sequence, mean-pool the token states, and apply one linear head.

use crate::error::{ensure, Result};
use crate::model::params::ModelConfig;
use crate::model::vit::{embed_patches, transformer, BoundParams};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::tensor::Real;

/// Encode a full unmasked patch sequence: `[P, p²C]` → `[P, D]`.
pub fn encode_full<F: Real>(
    g: &mut Graph<F>,
    bp: &BoundParams<'_, F>,
    cfg: &ModelConfig,
    patches: NodeId,
) -> Result<NodeId> {
    ensure!(
        g.shape(patches) == [cfg.num_patches(), cfg.patch_dim()],
        "patches have shape {:?}, model expects [{}, {}]",
        g.shape(patches),
        cfg.num_patches(),
        cfg.patch_dim()
    );
    let emb = embed_patches(g, bp, patches)?;
    let pos = bp.node("pos/enc")?;
    let x = g.add(emb, pos)?;
    transformer(g, bp, x, "enc", cfg.depth, cfg.heads)
}

/// Mean-pool token states and apply the linear head: `[P, D]` → `[1, classes]`.
pub fn classify<F: Real>(
    g: &mut Graph<F>,
    bp: &BoundParams<'_, F>,
    encoded: NodeId,
) -> Result<NodeId> {
    let pooled = g.mean_rows(encoded)?;
    let w = bp.node("cls/weight")?;
    let b = bp.node("cls/bias")?;
    let logits = g.matmul(pooled, w)?;
    g.add_row(logits, b)
}

/// Mean softmax cross-entropy of logit rows against integer labels.
pub fn ce_loss<F: Real>(g: &mut Graph<F>, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    g.cross_entropy_rows(logits, labels)
}
