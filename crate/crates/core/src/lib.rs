//! Catalog-specialized transformer language models for text-based
//! item-to-item recommendation.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! * [`catalog`] loads and splits title/description catalogs and expert
//!   annotation sets.
//! * [`tokenizer`] builds a vocabulary and encodes `[CLS] title [SEP]
//!   description` sequences with MLM masking.
//! * [`encoder`] is a from-scratch post-LN transformer encoder with
//!   hand-written backpropagation and a binary checkpoint format.
//! * [`objectives`] holds the cosine title-description head, the MLM
//!   classifier and their losses.
//! * [`trainer`] runs Adam with warmup, negative sampling and early stopping.
//! * [`ranker`] computes the four inference scores, z-normalizes and ranks.
//! * [`metrics`] computes HR@k, MRR and MPR over annotated seeds.
//! * [`synth`] generates clustered synthetic catalogs for end-to-end checks.
//! * [`cli`] wires everything into the `recobert` command.

pub mod catalog;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod hash;
pub mod metrics;
pub mod objectives;
pub mod optim;
pub mod ranker;
pub mod synth;
pub mod tokenizer;
pub mod trainer;

pub use catalog::{AnnotationSet, Catalog, CatalogItem};
pub use encoder::{EncoderConfig, Model, Parameters};
pub use error::{Error, Result};
pub use ranker::{EmbeddingStore, Lambdas, RankedList, Ranker};
pub use tokenizer::{InputSequence, MaskedSequence, Vocabulary};
