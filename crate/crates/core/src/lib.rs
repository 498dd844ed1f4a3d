//! Caption hallucination metrics (OH, AH, COAHA) with BLEU-4 and CIDEr-D, and
//! a context-gated video captioner with auxiliary heads, trainable on a
//! synthetic feature corpus.

pub mod analysis;
pub mod captioner;
pub mod config;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod features;
pub mod hallmetric;
pub mod lexicon;
pub mod report;
pub mod stdmetrics;
pub mod synthcorpus;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
