//! Benchmarking, tuning selection and device clustering behind the CLI.

mod cluster;
mod matrix;
mod run;
mod select;
mod sweep;

pub use cluster::*;
pub use matrix::*;
pub use run::*;
pub use select::*;
pub use sweep::*;
