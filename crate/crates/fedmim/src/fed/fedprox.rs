//! Proximal pull toward the round's starting model.
//!
//! With strength `mu`, local training minimises the task loss plus
//! `(mu / 2) * ||w - w_anchor||^2`, which damps client drift on heterogeneous
//! data. At `mu = 0` the term is structurally absent — no graph nodes, no
//! rounding — so plain averaging is recovered bit for bit.

use crate::error::{ensure, Error, Result};
use crate::model::{BoundParams, ModelParams};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::tensor::{Real, Tensor};

/// Closed-form penalty `(mu / 2) * sum((w - anchor)^2)` and its gradient
/// `mu * (w - anchor)`, evaluated in f64. This is the reference the in-graph
/// term is checked against, and the quantity reported when a run is audited.
pub fn fedprox_penalty<F: Real>(
    local: &[Tensor<F>],
    anchor: &[Tensor<F>],
    mu: f64,
) -> Result<(f64, Vec<Vec<F>>)> {
    ensure!(
        mu.is_finite() && mu >= 0.0,
        "proximal strength must be finite and non-negative, got {mu}"
    );
    ensure!(
        local.len() == anchor.len(),
        "local model has {} tensors, anchor has {}",
        local.len(),
        anchor.len()
    );
    let mut penalty = 0.0;
    let mut grads = Vec::with_capacity(local.len());
    for (w, a) in local.iter().zip(anchor) {
        ensure!(
            w.shape() == a.shape(),
            "local tensor shape {:?} does not match anchor {:?}",
            w.shape(),
            a.shape()
        );
        let mut g = Vec::with_capacity(w.numel());
        for (&wv, &av) in w.data().iter().zip(a.data()) {
            let d = wv.to_f64() - av.to_f64();
            penalty += 0.5 * mu * d * d;
            g.push(F::from_f64(mu * d));
        }
        grads.push(g);
    }
    Ok((penalty, grads))
}

/// Append the proximal term to a training graph, anchored at the round's
/// global model. Returns `None` at `mu = 0`: the caller adds nothing and the
/// graph stays identical to the unregularised one.
pub fn proximal_term<F: Real>(
    g: &mut Graph<F>,
    bp: &BoundParams<'_, F>,
    anchor: &ModelParams<F>,
    mu: f64,
) -> Result<Option<NodeId>> {
    ensure!(
        mu.is_finite() && mu >= 0.0,
        "proximal strength must be finite and non-negative, got {mu}"
    );
    if mu == 0.0 {
        return Ok(None);
    }
    ensure!(
        bp.params().names() == anchor.names(),
        "anchor layout does not match the model being trained"
    );
    let mut total: Option<NodeId> = None;
    for (name, at) in anchor.names().iter().zip(anchor.tensors()) {
        let w = bp.node(name)?;
        let a = g.constant(at.shape().to_vec(), at.data().to_vec())?;
        let d = g.sub(w, a)?;
        let sq = g.square(d);
        let s = g.sum_all(sq);
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| Error::contract("model has no parameters to anchor"))?;
    Ok(Some(g.scale(total, F::from_f64(0.5 * mu))))
}
