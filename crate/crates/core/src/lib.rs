//! Constrained two-sided flow matching for simulation-based inference.
//!
//! See the guide under `book/` for a walk-through; its code blocks run as
//! doc-tests of this crate.

pub mod error;
pub mod eval;
pub mod flowmatch;
pub mod geometry;
pub mod io;
pub mod nncore;
pub mod rng;
pub mod tasks;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/geometry.md")]
    struct Geometry;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/sampling.md")]
    struct Sampling;
    #[doc = include_str!("../../../book/src/tasks.md")]
    struct Tasks;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
