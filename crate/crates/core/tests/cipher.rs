use std::collections::HashMap;

use mlmass::cipher::{Cipher, Lexicon, SentenceSource};
use mlmass::corpus::registry_stats;
use mlmass::{generate_cipher_corpus, CipherSpec, CorpusRegistry, Reorder, SynthParams};
use proptest::prelude::*;

fn reorder() -> impl Strategy<Value = Reorder> {
    prop_oneof![
        Just(Reorder::None),
        Just(Reorder::AdjacentSwap),
        Just(Reorder::ReverseWindow(None)),
        (1usize..5).prop_map(|w| Reorder::ReverseWindow(Some(w))),
    ]
}

fn params(n: usize, vocab: usize) -> SynthParams {
    SynthParams {
        n_sentences: n,
        len_range: (1, 12),
        base_vocab_size: vocab,
        zipf_s: 1.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cipher_side_inverts_to_base_side(
        seed in any::<u64>(),
        lexicon_seed in any::<u64>(),
        reorder in reorder(),
        vocab in 10usize..200,
        shared in 0.0f64..=1.0,
    ) {
        let relative_spec = CipherSpec {
            lang: "xa".into(),
            lexicon_seed: Some(lexicon_seed ^ 1),
            relative: None,
            shared_fraction: 0.0,
            reorder: Reorder::None,
        };
        let relative = Lexicon::for_spec(&relative_spec, vocab, None).unwrap();
        let spec = CipherSpec {
            lang: "xd".into(),
            lexicon_seed: Some(lexicon_seed),
            relative: Some("xa".into()),
            shared_fraction: shared,
            reorder,
        };
        let corpus = generate_cipher_corpus(&spec, "en", Some(&relative), &params(50, vocab), seed).unwrap();
        let base = Cipher::new(CipherSpec::identity("en"), vocab, None).unwrap();
        let cipher = Cipher::new(spec, vocab, Some(&relative)).unwrap();
        for (b, c) in &corpus.parallel.pairs {
            let ids = cipher.parse(c).expect("every cipher word is in the lexicon");
            prop_assert_eq!(&base.render(&ids), b);
        }
    }

    #[test]
    fn stats_are_idempotent(seed in any::<u64>(), n in 1usize..40) {
        let spec = CipherSpec {
            lang: "xb".into(),
            lexicon_seed: Some(seed),
            relative: None,
            shared_fraction: 0.0,
            reorder: Reorder::AdjacentSwap,
        };
        let c = generate_cipher_corpus(&spec, "en", None, &params(n, 20), seed).unwrap();
        let mut r = CorpusRegistry::new();
        r.add_parallel(c.parallel);
        r.add_mono(c.cipher);
        let first = registry_stats(&r);
        prop_assert_eq!(&first, &registry_stats(&r));
        prop_assert!(first.iter().all(|row| row.count == n));
    }
}

#[test]
fn zipf_head_dominates_tenth_rank() {
    let mut source = SentenceSource::new(&params(0, 300), 17).unwrap();
    let mut counts: HashMap<usize, usize> = HashMap::new();
    let mut tokens = 0;
    while tokens < 100_000 {
        for w in source.sentence() {
            *counts.entry(w).or_default() += 1;
            tokens += 1;
        }
    }
    let mut freq: Vec<usize> = counts.into_values().collect();
    freq.sort_unstable_by(|a, b| b.cmp(a));
    assert!(freq[0] >= 5 * freq[9], "top {} vs tenth {}", freq[0], freq[9]);
}
