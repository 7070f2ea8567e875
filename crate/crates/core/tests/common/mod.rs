#![allow(dead_code)]

use mlmass::cipher::{generate_cipher_corpus, CipherSpec, Reorder, SynthParams};
use mlmass::corpus::CorpusRegistry;
use mlmass::mass::MaskSpec;
use mlmass::sampler::{Sampler, SamplingPolicy};
use mlmass::subword::{train_vocab, Vocabulary};
use mlmass::{Batch, ModelConfig, Objective};

/// Two cipher languages around base "en", with mono stores.
pub fn small_registry(n: usize, seed: u64) -> CorpusRegistry {
    let params = SynthParams {
        n_sentences: n,
        len_range: (2, 6),
        base_vocab_size: 20,
        zipf_s: 1.0,
    };
    let mut r = CorpusRegistry::new();
    for (i, lang) in ["xa", "xb"].iter().enumerate() {
        let spec = CipherSpec {
            lang: lang.to_string(),
            lexicon_seed: Some(seed + i as u64),
            relative: None,
            shared_fraction: 0.0,
            reorder: if i == 0 { Reorder::None } else { Reorder::AdjacentSwap },
        };
        let c = generate_cipher_corpus(&spec, "en", None, &params, seed * 10 + i as u64).unwrap();
        r.add_parallel(c.parallel);
        r.add_mono(c.cipher);
        if i == 0 {
            r.add_mono(c.base);
        }
    }
    r
}

pub fn vocab_for(r: &CorpusRegistry, size: usize) -> Vocabulary {
    train_vocab(r.all_text(), size, &r.languages()).unwrap()
}

pub fn tiny_config(vocab: &Vocabulary, d_model: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model,
        d_ff: 2 * d_model,
        dropout: 0.0,
        vocab_size: vocab.len(),
        max_positions: 32,
        tie_embeddings: true,
        label_smoothing: 0.1,
    }
}

/// First batch of the requested objective from a seeded stream.
pub fn batch_of(r: &CorpusRegistry, v: &Vocabulary, objective: Objective, rows: usize, seed: u64) -> Batch {
    let policy = SamplingPolicy {
        temperature: 5.0,
        mono_ratio: match objective {
            Objective::Translation => 0.0,
            Objective::Mass => 1.0,
        },
        batch_size: rows,
        max_len: 16,
        seed,
    };
    let mut s = Sampler::new(r, policy, MaskSpec::default(), v).unwrap();
    s.next_batch()
}
