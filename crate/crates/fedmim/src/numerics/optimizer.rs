//! AdamW with decoupled weight decay.
//!
//! Decay is applied multiplicatively to the parameter *before* the adaptive
//! update, so it never leaks into the moment estimates. Moments are stored
//! per parameter slot in insertion order, which keeps checkpointing and the
//! federated weight exchange trivially aligned.

use crate::error::{ensure, Error, Result};
use crate::numerics::tensor::{Real, Tensor};

/// Static optimiser hyper-parameters. The learning rate is passed per step
/// because the schedule owns it.
#[derive(Debug, Clone, Copy)]
pub struct AdamW<F: Real> {
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub weight_decay: F,
}

impl<F: Real> AdamW<F> {
    pub fn new(weight_decay: F) -> Self {
        AdamW {
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
            weight_decay,
        }
    }
}

/// First and second moment estimates plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F: Real> {
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(params: &[Tensor<F>]) -> Self {
        OptimizerState {
            step: 0,
            m: params.iter().map(|p| vec![F::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![F::zero(); p.numel()]).collect(),
        }
    }
}

/// One AdamW update over every parameter, consuming the gradients currently
/// stored on the tensors. Every parameter must hold a gradient.
pub fn adamw_step<F: Real>(
    params: &mut [Tensor<F>],
    state: &mut OptimizerState<F>,
    hyper: &AdamW<F>,
    lr: F,
) -> Result<()> {
    ensure!(
        state.m.len() == params.len(),
        "optimizer state tracks {} parameters, got {}",
        state.m.len(),
        params.len()
    );
    state.step += 1;
    let t = state.step as i32;
    let bc1 = F::one() - hyper.beta1.powi(t);
    let bc2 = F::one() - hyper.beta2.powi(t);
    let one = F::one();
    let decay = one - lr * hyper.weight_decay;

    for (i, p) in params.iter_mut().enumerate() {
        let grad = p.grad.take().ok_or_else(|| {
            Error::contract(format!("parameter {i} has no gradient before the update"))
        })?;
        ensure!(
            grad.len() == p.numel(),
            "parameter {i} gradient length mismatch"
        );
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        ensure!(
            m.len() == p.numel(),
            "optimizer state for parameter {i} has stale length"
        );
        let data = p.data_mut();
        for j in 0..data.len() {
            let g = grad[j];
            m[j] = hyper.beta1 * m[j] + (one - hyper.beta1) * g;
            v[j] = hyper.beta2 * v[j] + (one - hyper.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] = data[j] * decay - lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
        p.grad = Some(grad);
    }
    Ok(())
}

/// Reset every gradient buffer to zero (allocating none).
pub fn zero_grads<F: Real>(params: &mut [Tensor<F>]) {
    for p in params.iter_mut() {
        p.zero_grad();
    }
}
