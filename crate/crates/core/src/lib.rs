//! Learned single-pass prompt compression.
//!
//! A sigmoid head over the last hidden states of a causal language model
//! scores every prompt token; the top fraction is kept and detokenized. The
//! head (plus low-rank adapters) is trained self-supervised with a causal
//! language-modeling loss computed under the induced keep mask.

pub mod analysis;
pub mod backbone;
pub mod baselines;
pub mod checkpoint;
pub mod compressor;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod report;
pub mod selector;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
