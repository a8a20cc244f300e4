//! Masked-patch pixel reconstruction.
//!
//! The encoder sees only the visible patches; hidden ones are represented by
//! a shared learned token that enters at the *decoder*, which runs over the
//! full sequence and regresses raw pixels. The loss reads predictions only at
//! the hidden positions, so the model cannot copy its targets.

use crate::error::{ensure, Result};
use crate::masking::MaskPlan;
use crate::model::params::ModelConfig;
use crate::model::vit::{embed_patches, original_order, transformer, BoundParams};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::tensor::Real;

/// Encode the visible patches: `[P, p²C]` patches → `[V, D]` states.
pub fn encode_mae<F: Real>(
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
    ensure!(
        !plan.visible().is_empty(),
        "encoder needs at least one visible patch"
    );
    let vis = g.gather_rows(patches, plan.visible())?;
    let emb = embed_patches(g, bp, vis)?;
    let pos = bp.node("pos/enc")?;
    let pos_vis = g.gather_rows(pos, plan.visible())?;
    let x = g.add(emb, pos_vis)?;
    transformer(g, bp, x, "enc", cfg.depth, cfg.heads)
}

/// Decode encoder states back to pixel predictions for *every* patch:
/// `[V, D]` → `[P, p²C]`.
pub fn decode_mae<F: Real>(
    g: &mut Graph<F>,
    bp: &BoundParams<'_, F>,
    cfg: &ModelConfig,
    encoded: NodeId,
    plan: &MaskPlan,
) -> Result<NodeId> {
    ensure!(
        g.shape(encoded) == [plan.visible().len(), cfg.dim],
        "encoded states have shape {:?}, expected [{}, {}]",
        g.shape(encoded),
        plan.visible().len(),
        cfg.dim
    );
    let w = bp.node("dec/proj/weight")?;
    let b = bp.node("dec/proj/bias")?;
    let proj = g.matmul(encoded, w)?;
    let proj = g.add_row(proj, b)?;

    let seq = if plan.num_masked() == 0 {
        proj
    } else {
        let token = bp.node("mask/token")?;
        let hidden = g.repeat_row(token, plan.num_masked())?;
        let stacked = g.concat_rows(&[proj, hidden])?;
        g.gather_rows(stacked, &original_order(plan))?
    };
    let pos = bp.node("dec/pos")?;
    let x = g.add(seq, pos)?;
    let h = transformer(g, bp, x, "dec", cfg.dec_depth, cfg.heads)?;

    let w = bp.node("dec/head/weight")?;
    let b = bp.node("dec/head/bias")?;
    let out = g.matmul(h, w)?;
    g.add_row(out, b)
}

/// Reconstruction loss: squared error averaged per pixel within each hidden
/// patch, then averaged over the hidden patches.
pub fn mae_loss<F: Real>(
    g: &mut Graph<F>,
    predicted: NodeId,
    target_patches: NodeId,
    plan: &MaskPlan,
) -> Result<NodeId> {
    ensure!(
        plan.num_masked() >= 1,
        "reconstruction loss needs at least one hidden patch"
    );
    ensure!(
        g.shape(predicted) == g.shape(target_patches),
        "prediction shape {:?} does not match target shape {:?}",
        g.shape(predicted),
        g.shape(target_patches)
    );
    let pm = g.gather_rows(predicted, plan.masked())?;
    let tm = g.gather_rows(target_patches, plan.masked())?;
    let diff = g.sub(pm, tm)?;
    let sq = g.square(diff);
    // Transposing makes each hidden patch a column, so the row mean is the
    // per-patch pixel mean; the final mean runs over patches.
    let t = g.transpose(sq)?;
    let per_patch = g.mean_rows(t)?;
    Ok(g.mean_all(per_patch))
}
