//! Metric-learning toolkit for zero-shot cross-lingual image retrieval.
//!
//! Trains a text-side projection head that maps cross-lingual sentence
//! embeddings into a frozen image-embedding space, using ratio-form (M3L)
//! or hinge-form (PATR) triplet objectives with in-batch hard-negative
//! mining, then evaluates retrieval as Recall@K per language against a
//! shared image gallery.
//!
//! Everything is deterministic given a seed: file formats are bit-exact,
//! forward/backward passes fix their summation orders, and training draws
//! all randomness from seeded ChaCha8 streams.

pub mod data_io;
pub mod error;
pub mod eval;
pub mod losses;
pub mod matrix;
pub mod mining;
pub mod projection;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
