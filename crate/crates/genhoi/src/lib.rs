//! Guided-embedding human-object interaction detection with
//! visual-linguistic knowledge transfer.

pub mod autograd;
pub mod boxes;
pub mod config;
pub mod data;
mod error;
pub mod evaluation;
pub mod inference;
pub mod label_space;
pub mod loss;
pub mod matching;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;
pub mod vlkt;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/label-space.md")]
    mod label_space {}
    #[doc = include_str!("../../../book/src/text-embeddings.md")]
    mod text_embeddings {}
    #[doc = include_str!("../../../book/src/dataset.md")]
    mod dataset {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/inference-evaluation.md")]
    mod inference_evaluation {}
    #[doc = include_str!("../../../book/src/zero-shot.md")]
    mod zero_shot {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
