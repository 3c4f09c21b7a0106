//! The guide under `book/` doubles as this crate's documentation: each
//! chapter is included below, so `cargo test --doc -p brw-book` compiles
//! and runs every Rust code block in the book. mdbook cannot run examples
//! against a crate, so this is the harness that keeps the book honest; a
//! snippet that stops compiling or asserting fails the workspace tests.
//!
//! One module per chapter keeps doctest failures attributable to the
//! markdown file they came from.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}

#[doc = include_str!("../../../book/src/martingales.md")]
pub mod martingales {}

#[doc = include_str!("../../../book/src/renewal.md")]
pub mod renewal {}

#[doc = include_str!("../../../book/src/spine.md")]
pub mod spine {}

#[doc = include_str!("../../../book/src/stable.md")]
pub mod stable {}

#[doc = include_str!("../../../book/src/fluctuation.md")]
pub mod fluctuation {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}

#[doc = include_str!("../../../book/src/acceptance.md")]
pub mod acceptance {}
