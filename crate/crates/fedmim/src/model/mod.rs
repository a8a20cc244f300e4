//! Vision-transformer models: geometry, parameters, objectives.

pub mod beit;
pub mod checkpoint;
pub mod classify;
pub mod geometry;
pub mod mae;
pub mod params;
pub mod vit;

pub use beit::{beit_loss, decode_beit, encode_beit};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use classify::{ce_loss, classify, encode_full};
pub use geometry::{patchify, unpatchify};
pub use mae::{decode_mae, encode_mae, mae_loss};
pub use params::{ModelConfig, ModelKind, ModelParams};
pub use vit::BoundParams;
