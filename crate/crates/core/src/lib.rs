//! Span-level propaganda detection.
//!
//! The crate is organized around the two subtasks of the shared task it
//! targets:
//!
//! - **span identification (SI)**: articles are split into segments
//!   ([`segmenter`]), encoded ([`neural`]) and tagged with a binary
//!   linear-chain CRF ([`crf`]); token runs are rejoined into character spans.
//! - **technique classification (TC)**: every given span is classified into
//!   one of the 14 [`Technique`]s by a dense funnel on top of the encoder,
//!   optionally as a majority-vote ensemble over pre-training checkpoints.
//!
//! [`corpus`] holds the data model and file formats, [`eval`] the scorers and
//! [`pipelines`] the training/prediction orchestration. [`synth`] generates
//! the seeded synthetic corpora used for end-to-end checks.

pub mod corpus;
pub mod crf;
mod error;
pub mod eval;
pub mod neural;
pub mod pipelines;
pub mod segmenter;
pub mod synth;

pub use corpus::{Article, ClassifiedSample, SiLabel, Span, TcLabel, Technique};
pub use error::{Error, Result};
