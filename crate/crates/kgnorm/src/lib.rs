//! Contrastive knowledge-graph term embeddings for zero-shot term normalization.
//!
//! The crate trains a compact sequence encoder so that synonymous terms
//! (possibly in different languages) map to nearby vectors and relation
//! structure is encoded through per-relation transforms. Normalization is
//! cosine nearest-neighbor search over an embedded term dictionary.
//!
//! Modules follow the pipeline:
//!
//! - [`kg_store`]: concept dictionary and relation triplets (TSV ingestion)
//! - [`tokenizer`]: deterministic subword tokenization
//! - [`encoder`]: trainable encoder with exact manual gradients and checkpoints
//! - [`contrastive`]: similarities, hard-pair mining, multi-similarity losses
//! - [`sampler`]: triplet batches with the m-repeat guarantee
//! - [`trainer`]: AdamW loop, lr schedule, finite-difference gradient checker
//! - [`normalizer`]: embedding index, top-k retrieval, accuracy/F1 evaluation
//! - [`metrics`]: semantic-neighborhood measure and relation-classification probe
//! - [`synth`]: synthetic benchmark generator
//! - [`cli`]: command-line entry point

pub mod cli;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod kg_store;
pub mod metrics;
pub mod normalizer;
pub mod num;
pub mod sampler;
pub mod synth;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
