//! Multi-vector embedding fusion at desk scale.
//!
//! An item is embedded as one global row plus `N` fine-grained rows. Between a
//! query and a target this induces four families of dot-product similarities
//! (global-to-global, fine-to-global, global-to-fine, fine-to-fine) which are
//! fused into a single score, by default through a logsumexp over all `3N+1`
//! terms. The crate provides:
//!
//! * the similarity families, aggregators, and their softmax pattern weights
//!   ([`multivec`]),
//! * a temperature-scaled contrastive loss over one positive and in-batch
//!   negatives ([`loss`]),
//! * closed-form per-embedding gradients of that loss, with optional
//!   hard-negative amplification, plus finite-difference auditing ([`grad`]),
//! * a small deterministic encoder that maps raw features to an embedding set
//!   ([`encoder`]),
//! * a two-pass trainer that caches embedding gradients and back-propagates
//!   them through the encoder in sub-batches ([`trainer`]),
//! * a synthetic retrieval benchmark with planted match patterns ([`synth`]).
//!
//! Everything is deterministic given a seed: reductions run in a fixed order,
//! so results do not depend on thread count or the `parallel` feature.

pub mod encoder;
pub mod error;
pub mod grad;
pub mod loss;
pub mod multivec;
pub mod numerics;
pub mod parallel;
pub mod real;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
