//! Image captioning from precomputed image embeddings.
//!
//! Captions are generated one word at a time by a network that reads a
//! projected image vector followed by the caption so far, runs two stacked
//! bidirectional LSTM layers over that sequence, and predicts the next word.
//! Everything below the embedding vectors is implemented here: tokenization,
//! next-token sample expansion, backpropagation through time, SGD, greedy
//! decoding, and BLEU scoring.
//!
//! The modules follow the pipeline:
//!
//! - [`text`]: tokenization, vocabularies, fixed-length encoding
//! - [`data`]: caption/embedding files, sample expansion, splits, synthetic data
//! - [`model`]: parameters, forward pass, checkpoints
//! - [`train`]: backward pass, gradient checking, SGD
//! - [`decode`]: greedy caption generation
//! - [`eval`]: BLEU and evaluation reports

pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod model;
pub mod text;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/text.md")]
    mod text {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    mod decoding {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
