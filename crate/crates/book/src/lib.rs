//! The guide's chapters, one module each, so `cargo test --doc` runs every
//! listing in `book/src`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/corpus-format.md")]
pub mod corpus_format {}
#[doc = include_str!("../../../book/src/snippets.md")]
pub mod snippets {}
#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/decoding.md")]
pub mod decoding {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
