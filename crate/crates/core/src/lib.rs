//! Multilingual translation co-trained with masked sequence-to-sequence
//! self-supervision, at desk scale.
//!
//! The pipeline runs from text to scores:
//! [`subword`] builds a shared vocabulary with one `<2xx>` tag per language,
//! [`corpus`] and [`cipher`] provide parallel and monolingual stores,
//! [`sampler`] mixes temperature-balanced translation batches with
//! [`mass`] batches, [`model`] and [`trainer`] fit a transformer, and
//! [`eval`] and [`harness`] score and compare experiment arms.

pub mod batch;
pub mod cipher;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod harness;
pub mod mass;
pub mod model;
pub mod sampler;
pub mod subword;
pub mod trainer;

pub use batch::{Batch, Objective, TrainingExample};
pub use cipher::{generate_cipher_corpus, CipherSpec, Reorder, SynthParams};
pub use corpus::{CorpusRegistry, MonoStore, ParallelStore};
pub use error::{Error, Result};
pub use mass::MaskSpec;
pub use model::{ModelConfig, ModelParams};
pub use sampler::{language_probabilities, Sampler, SamplingPolicy};
pub use subword::Vocabulary;
