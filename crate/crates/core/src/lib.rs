//! Entity-aware n-best reranking for speech recognition.
//!
//! A reranker is trained without transcribed n-best lists: every training
//! sentence is contrasted against artificial hypotheses made by swapping
//! words for phonetically confusable ones. Candidates are scored by a
//! bidirectional LSTM plus quantized knowledge-base features and an n-gram
//! language model score.
//!
//! The chapters under `book/` walk through each stage; their code snippets
//! run as doctests of this crate.

pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod kb;
pub mod negsampler;
pub mod neural;
pub mod ngram;
pub mod pipeline;
pub mod synth;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/ngram.md")]
    mod ngram {}
    #[doc = include_str!("../../../book/src/negatives.md")]
    mod negatives {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/scorer.md")]
    mod scorer {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
