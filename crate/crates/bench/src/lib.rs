//! Fixtures shared by the benchmarks.

pub use mlmass::{Batch, CorpusRegistry, ModelConfig, ModelParams, Objective, Vocabulary};

use mlmass::harness::{Suite, SuiteConfig};
use mlmass::{MaskSpec, Sampler, SamplingPolicy};

/// A small default-shaped suite: four ciphers around `en`.
pub fn suite(pairs: usize) -> Suite {
    let mut cfg = SuiteConfig {
        base_mono: pairs,
        test_size: 100,
        dev_size: 0,
        ..SuiteConfig::default()
    };
    for l in &mut cfg.languages {
        l.parallel = pairs;
        l.mono = pairs;
    }
    Suite::build(&cfg).expect("fixture suite")
}

pub fn model_config(vocab: &Vocabulary, d_model: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model,
        d_ff: 2 * d_model,
        dropout: 0.1,
        vocab_size: vocab.len(),
        max_positions: 32,
        tie_embeddings: true,
        label_smoothing: 0.1,
    }
}

pub fn batch(suite: &Suite, objective: Objective, rows: usize) -> Batch {
    let policy = SamplingPolicy {
        mono_ratio: if objective == Objective::Mass { 1.0 } else { 0.0 },
        batch_size: rows,
        max_len: 16,
        ..SamplingPolicy::default()
    };
    Sampler::new(&suite.registry, policy, MaskSpec::default(), &suite.vocab)
        .expect("sampler")
        .next_batch()
}
