//! Tensors, the autodiff tape, the optimiser, and their verification tools.

pub mod gradcheck;
pub mod graph;
pub mod optimizer;
pub mod schedule;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOpts, GradReport};
pub use graph::{Graph, NodeId};
pub use optimizer::{adamw_step, zero_grads, AdamW, OptimizerState};
pub use schedule::{schedule_at, Schedule};
pub use tensor::{Dtype, Real, Tensor};
