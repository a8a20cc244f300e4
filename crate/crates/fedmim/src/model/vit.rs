//! The shared transformer trunk, expressed as graph-building functions.
//!
//! Blocks are pre-norm: `x + Attn(LN(x))` then `x + MLP(LN(x))`, with a final
//! layer norm after the last block. Heads are carved out of the width with
//! column slices, so the whole model stays in plain 2-d matrices.

use crate::error::{ensure, Result};
use crate::masking::MaskPlan;
use crate::model::params::ModelParams;
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::tensor::Real;

/// Parameters materialised as graph leaves, one per tensor, addressable by
/// name. The leaf's parameter slot is the tensor's wire position, so
/// `Graph::param_grads` lines up with `ModelParams::tensors` directly.
pub struct BoundParams<'a, F: Real> {
    params: &'a ModelParams<F>,
    nodes: Vec<NodeId>,
}

impl<'a, F: Real> BoundParams<'a, F> {
    pub fn bind(graph: &mut Graph<F>, params: &'a ModelParams<F>) -> Result<Self> {
        let nodes = params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| graph.leaf(t.shape().to_vec(), t.data().to_vec(), Some(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundParams { params, nodes })
    }

    /// Wrap leaves created elsewhere (the gradient checker owns its own).
    /// Leaf order must match the parameter wire order.
    pub fn from_leaves(params: &'a ModelParams<F>, nodes: Vec<NodeId>) -> Result<Self> {
        ensure!(
            nodes.len() == params.len(),
            "got {} leaves for {} parameters",
            nodes.len(),
            params.len()
        );
        Ok(BoundParams { params, nodes })
    }

    pub fn node(&self, name: &str) -> Result<NodeId> {
        Ok(self.nodes[self.params.position(name)?])
    }

    pub fn params(&self) -> &ModelParams<F> {
        self.params
    }
}

/// Linear patch embedding: `[n, p²C] → [n, D]`.
pub fn embed_patches<F: Real>(
    g: &mut Graph<F>,
    bp: &BoundParams<'_, F>,
    patches: NodeId,
) -> Result<NodeId> {
    let w = bp.node("embed/weight")?;
    let b = bp.node("embed/bias")?;
    let h = g.matmul(patches, w)?;
    g.add_row(h, b)
}

fn linear<F: Real>(
    g: &mut Graph<F>,
    bp: &BoundParams<'_, F>,
    x: NodeId,
    weight: &str,
    bias: &str,
) -> Result<NodeId> {
    let w = bp.node(weight)?;
    let b = bp.node(bias)?;
    let h = g.matmul(x, w)?;
    g.add_row(h, b)
}

fn layer_norm_named<F: Real>(
    g: &mut Graph<F>,
    bp: &BoundParams<'_, F>,
    x: NodeId,
    prefix: &str,
) -> Result<NodeId> {
    let gamma = bp.node(&format!("{prefix}/gamma"))?;
    let beta = bp.node(&format!("{prefix}/beta"))?;
    g.layer_norm(x, gamma, beta)
}

fn attention<F: Real>(
    g: &mut Graph<F>,
    bp: &BoundParams<'_, F>,
    x: NodeId,
    prefix: &str,
    heads: usize,
) -> Result<NodeId> {
    let dim = g.shape(x)[1];
    ensure!(
        heads > 0 && dim % heads == 0,
        "width {dim} is not divisible into {heads} heads"
    );
    let dh = dim / heads;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());

    let q = linear(g, bp, x, &format!("{prefix}/attn/wq"), &format!("{prefix}/attn/bq"))?;
    // No key bias: shifting every key by a constant adds the same offset to a
    // whole row of scores, which the row softmax cancels exactly.
    let wk = bp.node(&format!("{prefix}/attn/wk"))?;
    let k = g.matmul(x, wk)?;
    let v = linear(g, bp, x, &format!("{prefix}/attn/wv"), &format!("{prefix}/attn/bv"))?;

    let mut mixed = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let kt = g.transpose(kh)?;
        let raw = g.matmul(qh, kt)?;
        let scores = g.scale(raw, scale);
        let probs = g.softmax(scores)?;
        mixed.push(g.matmul(probs, vh)?);
    }
    let joined = g.concat_cols(&mixed)?;
    linear(g, bp, joined, &format!("{prefix}/attn/wo"), &format!("{prefix}/attn/bo"))
}

fn block<F: Real>(
    g: &mut Graph<F>,
    bp: &BoundParams<'_, F>,
    x: NodeId,
    prefix: &str,
    heads: usize,
) -> Result<NodeId> {
    let normed = layer_norm_named(g, bp, x, &format!("{prefix}/ln1"))?;
    let attended = attention(g, bp, normed, prefix, heads)?;
    let x = g.add(x, attended)?;

    let normed = layer_norm_named(g, bp, x, &format!("{prefix}/ln2"))?;
    let h = linear(g, bp, normed, &format!("{prefix}/mlp/w1"), &format!("{prefix}/mlp/b1"))?;
    let act = g.gelu(h);
    let out = linear(g, bp, act, &format!("{prefix}/mlp/w2"), &format!("{prefix}/mlp/b2"))?;
    g.add(x, out)
}

/// Run `depth` pre-norm blocks named `{prefix}0..` and the trailing
/// `{prefix}_final` layer norm.
pub fn transformer<F: Real>(
    g: &mut Graph<F>,
    bp: &BoundParams<'_, F>,
    mut x: NodeId,
    prefix: &str,
    depth: usize,
    heads: usize,
) -> Result<NodeId> {
    for l in 0..depth {
        x = block(g, bp, x, &format!("{prefix}{l}"), heads)?;
    }
    layer_norm_named(g, bp, x, &format!("{prefix}_final/ln"))
}

/// Gather order that restores original patch positions from a sequence
/// stacked as `[visible rows ‖ masked rows]`.
pub fn original_order(plan: &MaskPlan) -> Vec<usize> {
    let mut order = vec![0usize; plan.num_patches()];
    for (slot, &patch) in plan.visible().iter().enumerate() {
        order[patch] = slot;
    }
    for (slot, &patch) in plan.masked().iter().enumerate() {
        order[patch] = plan.visible().len() + slot;
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{ModelConfig, ModelKind};
    use crate::seeds;
    use rand::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            image_h: 8,
            image_w: 8,
            channels: 1,
            patch: 2,
            dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            dec_dim: 8,
            dec_depth: 1,
            vocab: 4,
            num_classes: 2,
        }
    }

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeds::stream(seed, &[]);
        (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn trunk_output_has_token_shape_and_is_finite() {
        let cfg = cfg();
        let params = ModelParams::<f64>::init(&cfg, ModelKind::Classifier, 1).unwrap();
        let mut g = Graph::new();
        let bp = BoundParams::bind(&mut g, &params).unwrap();
        let x = g.constant(vec![5, 8], random_rows(5, 8, 42)).unwrap();
        let y = transformer(&mut g, &bp, x, "enc", cfg.depth, cfg.heads).unwrap();
        assert_eq!(g.shape(y), &[5, 8]);
        assert!(g.data(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn trunk_is_equivariant_to_token_order() {
        // Without positional information, permuting the input rows must
        // permute the output rows and change nothing else.
        let cfg = cfg();
        let params = ModelParams::<f64>::init(&cfg, ModelKind::Classifier, 2).unwrap();
        let rows = 6;
        let data = random_rows(rows, 8, 7);
        let perm = [3usize, 0, 5, 1, 4, 2];

        let run = |input: Vec<f64>| {
            let mut g = Graph::new();
            let bp = BoundParams::bind(&mut g, &params).unwrap();
            let x = g.constant(vec![rows, 8], input).unwrap();
            let y = transformer(&mut g, &bp, x, "enc", cfg.depth, cfg.heads).unwrap();
            g.data(y).to_vec()
        };

        let base = run(data.clone());
        let mut shuffled = vec![0.0; data.len()];
        for (dst, &src) in perm.iter().enumerate() {
            shuffled[dst * 8..(dst + 1) * 8].copy_from_slice(&data[src * 8..(src + 1) * 8]);
        }
        let permuted_out = run(shuffled);
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..8 {
                let diff = (permuted_out[dst * 8 + j] - base[src * 8 + j]).abs();
                assert!(diff < 1e-12, "row {dst} col {j} differs by {diff}");
            }
        }
    }

    #[test]
    fn restore_order_inverts_the_visible_masked_stacking() {
        let plan = crate::masking::MaskPlan::new(6, vec![1, 4]).unwrap();
        // Stacked sequence: visible [0, 2, 3, 5] then masked [1, 4].
        assert_eq!(original_order(&plan), vec![0, 4, 1, 2, 5, 3]);
    }
}
