//! The book's chapters, mounted as rustdoc so their examples compile and run
//! under `cargo test --doc`.
//!
//! mdbook renders `book/src` but cannot execute the snippets; rustdoc can.
//! Including each chapter as the docs of an empty module keeps one source of
//! truth and turns every ```rust fence in the book into a test. One module
//! per chapter, so a failing snippet names the chapter it came from.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/getting-started.md")]
pub mod getting_started {}

#[doc = include_str!("../../../book/src/compute-graph.md")]
pub mod compute_graph {}

#[doc = include_str!("../../../book/src/vision-transformer.md")]
pub mod vision_transformer {}

#[doc = include_str!("../../../book/src/masked-objectives.md")]
pub mod masked_objectives {}

#[doc = include_str!("../../../book/src/federated-loop.md")]
pub mod federated_loop {}

#[doc = include_str!("../../../book/src/heterogeneous-data.md")]
pub mod heterogeneous_data {}

#[doc = include_str!("../../../book/src/determinism.md")]
pub mod determinism {}

#[doc = include_str!("../../../book/src/file-formats.md")]
pub mod file_formats {}

#[doc = include_str!("../../../book/src/command-line.md")]
pub mod command_line {}
