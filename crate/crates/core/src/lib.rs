//! Simulated multiple reference training for small dialog models.
//!
//! A paraphrase teacher supplies a full next-token distribution along a
//! freshly sampled paraphrase of each reference, and the student is trained
//! toward that distribution instead of the single reference. The crate holds
//! everything needed to run the comparison against a plain NLL baseline at
//! desk scale: an autodiff engine, a transformer encoder-decoder, oracle and
//! learned teachers, the training objectives, decoding with MMI reranking,
//! and the evaluation metrics with a pairwise bootstrap test.

pub mod autodiff;
pub mod data;
pub mod decode;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod runner;
pub mod teacher;
