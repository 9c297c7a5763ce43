//! Persona-conditioned visual story generation.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`tape`], [`layers`], [`optim`], [`gradcheck`] and
//!   [`checkpoint`]: a small reverse-mode autodiff core with the LSTM, CNN
//!   and loss primitives the models need, plus Adam and the checkpoint file
//!   format.
//! - [`text`] and [`synth`]: tokenization, vocabulary, story and utterance
//!   records, and a deterministic synthetic corpus.
//! - [`persona`]: sentence embeddings, persona and story-style vectors,
//!   k-means and balanced binary datasets.
//! - [`classifier`]: binary text CNNs over hard token ids or soft token
//!   distributions.
//! - [`model`]: the glocal encoder-decoder and its five persona-conditioned
//!   variants, multitask training and generation.
//! - [`pipeline`]: persona discovery and per-persona classifier training
//!   over labelled utterances.
//! - [`eval`]: ROUGE-L, sentence-level persona accuracy and reports.
//!
//! The guide in `book/` walks through each layer; its snippets run as
//! doctests of this crate.

pub mod checkpoint;
pub mod classifier;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod persona;
pub mod pipeline;
pub mod params;
pub mod tape;
pub mod synth;
pub mod tensor;
pub mod text;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use optim::AdamState;
pub use params::ParamStore;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

// The guide's code blocks run as doctests. One module per chapter keeps
// failures attributable.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/personas.md")]
    mod personas {}
    #[doc = include_str!("../../../book/src/classifiers.md")]
    mod classifiers {}
    #[doc = include_str!("../../../book/src/variants.md")]
    mod variants {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
