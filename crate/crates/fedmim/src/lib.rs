//! Desk-scale federated masked-image-modelling simulator.
//!
//! The crate trains small vision transformers with self-supervised masking
//! objectives across simulated clients, then fine-tunes them for
//! classification — all on synthetic imagery, on one machine, bitwise
//! reproducibly. See the book under `book/` for a guided tour; the `guide`
//! module mirrors its chapters so the snippets stay compiled and tested.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod fed;
pub mod guide;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod seeds;
pub mod tokenizer;

pub use error::{Error, Result};
