pub mod centers;
pub mod cli;
pub mod config;
pub mod error;
pub mod grid;
pub mod local_otsu;
pub mod metrics;
pub mod pipeline;
pub mod sor;
pub mod stack_io;
pub mod stfilter;
pub mod subsurf;
pub mod sweep;
pub mod synth;
pub mod tracker;

pub use error::{Error, Result};

/// The guide's chapters, compiled so that their code blocks run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/stacks.md")]
    mod stacks {}
    #[doc = include_str!("../../../book/src/filtering.md")]
    mod filtering {}
    #[doc = include_str!("../../../book/src/thresholding.md")]
    mod thresholding {}
    #[doc = include_str!("../../../book/src/level_sets.md")]
    mod level_sets {}
    #[doc = include_str!("../../../book/src/centres.md")]
    mod centres {}
    #[doc = include_str!("../../../book/src/tracking.md")]
    mod tracking {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/sweeps.md")]
    mod sweeps {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
