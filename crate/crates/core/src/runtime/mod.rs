//! Graph runtime: parameter arena, memory planning and batched execution.

mod arena;
mod breakdown;
mod config;
mod exec;
mod graph;
mod micro;
mod plan;
mod reference;

pub use arena::*;
pub use breakdown::*;
pub use config::*;
pub use exec::*;
pub use graph::*;
pub use micro::*;
pub use plan::*;
pub use reference::*;
