//! Masked-patch token prediction.
//!
//! The encoder runs over the full sequence with hidden positions replaced by
//! a learned embedding, and a single linear head predicts each hidden patch's
//! codebook token. Cross-entropy is averaged over the hidden positions only.

use crate::error::{ensure, Result};
use crate::masking::MaskPlan;
use crate::model::params::ModelConfig;
use crate::model::vit::{embed_patches, original_order, transformer, BoundParams};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::tensor::Real;

/// Encode the full patch sequence with hidden positions substituted by the
/// mask embedding: `[P, p²C]` patches → `[P, D]` states.
pub fn encode_beit<F: Real>(
    g: &mut Graph<F>,
    bp: &BoundParams<'_, F>,
    cfg: &ModelConfig,
    patches: NodeId,
    plan: &MaskPlan,
) -> Result<NodeId> {
    ensure!(
        plan.num_patches() == cfg.num_patches(),
        "mask plan covers {} patches, model expects {}",
        plan.num_patches(),
        cfg.num_patches()
    );
    let seq = if plan.num_masked() == 0 {
        embed_patches(g, bp, patches)?
    } else if plan.visible().is_empty() {
        let token = bp.node("mask/token")?;
        g.repeat_row(token, plan.num_masked())?
    } else {
        let vis = g.gather_rows(patches, plan.visible())?;
        let emb = embed_patches(g, bp, vis)?;
        let token = bp.node("mask/token")?;
        let hidden = g.repeat_row(token, plan.num_masked())?;
        let stacked = g.concat_rows(&[emb, hidden])?;
        g.gather_rows(stacked, &original_order(plan))?
    };
    let pos = bp.node("pos/enc")?;
    let x = g.add(seq, pos)?;
    transformer(g, bp, x, "enc", cfg.depth, cfg.heads)
}

/// Token logits for every position: `[P, D]` states → `[P, vocab]`.
pub fn decode_beit<F: Real>(
    g: &mut Graph<F>,
    bp: &BoundParams<'_, F>,
    encoded: NodeId,
) -> Result<NodeId> {
    let w = bp.node("beit_head/weight")?;
    let b = bp.node("beit_head/bias")?;
    let out = g.matmul(encoded, w)?;
    g.add_row(out, b)
}

/// Cross-entropy between the hidden positions' logits and their codebook
/// tokens, averaged over the hidden positions. `tokens` gives the token of
/// every patch; only the hidden ones are read.
pub fn beit_loss<F: Real>(
    g: &mut Graph<F>,
    logits: NodeId,
    plan: &MaskPlan,
    tokens: &[usize],
) -> Result<NodeId> {
    ensure!(
        plan.num_masked() >= 1,
        "token loss needs at least one hidden patch"
    );
    ensure!(
        tokens.len() == plan.num_patches(),
        "got {} tokens for {} patches",
        tokens.len(),
        plan.num_patches()
    );
    ensure!(
        g.shape(logits)[0] == plan.num_patches(),
        "logits cover {} positions, plan has {}",
        g.shape(logits)[0],
        plan.num_patches()
    );
    let hidden_logits = g.gather_rows(logits, plan.masked())?;
    let targets: Vec<usize> = plan.masked().iter().map(|&i| tokens[i]).collect();
    g.cross_entropy_rows(hidden_logits, &targets)
}
