//! Transductive few-shot classification over pre-computed embeddings.
//!
//! Given an N-way K-shot episode (K labeled support samples per class plus a
//! batch of unlabeled queries), the engine classifies every query by
//! comparing it against per-class prototypes with a small learned similarity
//! network, then *purifies* the prototypes: queries are clustered by their
//! predicted label, each query is scored by how strongly it relates to its
//! own cluster versus the most confusable rival cluster, and only the
//! top-ranked members are folded back into the prototype. Repeating this
//! classify/score/refine loop a few times walks the prototypes away from
//! outliers and toward the true class centers, which is where the accuracy
//! gain over a one-shot prototype baseline comes from.
//!
//! # Modules
//!
//! - [`embedding`] — vector/dataset types, synthetic data generation,
//!   JSON-Lines dataset IO, episodic sampling.
//! - [`simnet`] — the similarity network (MLP over |a−b| with sigmoid
//!   output), hand-derived gradients for both training losses, Adam, and
//!   JSON checkpoints.
//! - [`pcp`] — the purification loop itself: prototypes, classification,
//!   query-pair relations, degree scoring, refinement, and ablation modes.
//! - [`trainer`] — the two-stage episodic training schedule (classifier
//!   first, relation network second with the classifier frozen).
//! - [`eval`] — batched episode evaluation with confidence intervals,
//!   parameter sweeps, and report serialization.
//!
//! All randomness flows through explicitly seeded ChaCha8 generators, so
//! every result in the crate is reproducible bit-for-bit from a `u64` seed,
//! including under the parallel evaluator.

pub mod embedding;
pub mod error;
pub mod eval;
pub mod pcp;
pub mod simnet;
pub mod trainer;

pub use error::{Error, Result};
