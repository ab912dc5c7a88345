//! Topic-aware contrastive training for small dialogue summarization models.
//!
//! The crate trains an encoder-decoder transformer on dialogue → summary
//! pairs and sharpens it with two contrastive side objectives: telling
//! ordered dialogue snippets from shuffled ones, and generating the summary
//! sentence a snippet covers best. The pieces are organized bottom-up:
//!
//! * [`corpus`]: records, tokenization, vocabulary, synthetic data
//! * [`rouge`]: n-gram and subsequence overlap scores
//! * [`pairs`]: snippet enumeration and contrastive pair sampling
//! * [`tensor`]: dense tensors with reverse-mode differentiation
//! * [`model`]: the transformer and its coherence head
//! * [`losses`]: summarization and contrastive objectives
//! * [`trainer`]: batching, optimizer, alternating update loop
//! * [`evalgen`]: beam search, ROUGE evaluation, diagnostics
//!
//! Per-dialogue work (pair sampling, evaluation decoding) runs through
//! [`par`], which uses a thread pool when the `parallel` feature (default)
//! is enabled and plain iteration otherwise; results are identical either
//! way because every random draw is derived from explicit seeds.

pub mod corpus;
pub mod evalgen;
pub mod losses;
pub mod model;
pub mod par;
pub mod pairs;
pub mod rouge;
pub mod seeds;
pub mod tensor;
pub mod trainer;
