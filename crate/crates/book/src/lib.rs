//! mdbook cannot run listings that depend on workspace crates, so each
//! chapter is pulled in here as module docs and `cargo test --doc` runs
//! them. A failure names the module, which names the chapter.

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/quickstart.md")]
pub mod quickstart {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/queries.md")]
pub mod queries {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/selection.md")]
pub mod selection {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/lookup.md")]
pub mod lookup {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/tokens.md")]
pub mod tokens {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/storage.md")]
pub mod storage {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cost.md")]
pub mod cost {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
pub mod readme {}
