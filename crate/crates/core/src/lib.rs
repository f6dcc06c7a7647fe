//! Knowledge-grounded dialogue generation with posterior-guided
//! knowledge selection.
//!
//! The model encodes an utterance and a collection of knowledge
//! sentences with parameter-disjoint bidirectional GRUs, scores the
//! collection with a prior distribution (utterance only) and a posterior
//! distribution (utterance and response), draws a knowledge vector by
//! Gumbel-Softmax, and decodes the response with attention while
//! incorporating that vector either by input concatenation or through a
//! gated fusion unit. Training minimizes `kl + nll + bow`: a KL term
//! teaching the prior to track the posterior, teacher-forced negative
//! log-likelihood, and a bag-of-words term grounding the sampled
//! knowledge in the response.
//!
//! Everything is built on the crate's own reverse-mode [`tensor`]
//! engine in 64-bit floats, so gradients are checkable against central
//! finite differences end to end.

pub mod checkpoint;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod knowledge;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{DecoderMode, ModelConfig, PostSelModel};
