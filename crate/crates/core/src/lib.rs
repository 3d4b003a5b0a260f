//! Referring video object segmentation with mask priors and a
//! global-historical aggregator, at desk scale.
//!
//! Start with [`model::Model`] for the network, [`pipeline`] for training and
//! evaluation runs, and [`synth`] for the procedural clips. The guide under
//! `book/` explains each part; its code blocks run as doc-tests here.

pub mod aggregator;
pub mod encoder;
pub mod error;
pub mod head;
pub mod io;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod prior;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/tensors.md")]
    pub struct Tensors;
    #[doc = include_str!("../../../book/src/synthetic-data.md")]
    pub struct SyntheticData;
    #[doc = include_str!("../../../book/src/model.md")]
    pub struct Model;
    #[doc = include_str!("../../../book/src/memory.md")]
    pub struct Memory;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
