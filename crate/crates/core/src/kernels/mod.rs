//! The kernel corpus and the library interface around it.
//!
//! An op plus an [`OpContext`] is specialized into a [`KernelKey`] and
//! preprocessed WGSL; the [`PipelineCache`] compiles each distinct key once.

mod cache;
mod key;
mod ops;
pub(crate) mod programs;
mod specialize;
pub mod templates;

pub use cache::*;
pub use key::*;
pub use ops::*;
pub use specialize::*;
