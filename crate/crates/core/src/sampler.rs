//! Seeded batch stream mixing translation and MASS batches.
//!
//! Each batch first draws its source: monolingual with probability
//! `mono_ratio`, parallel otherwise. Parallel batches pick a direction with
//! temperature-scaled probability `p ∝ n^(1/T)`; monolingual batches pick a
//! language uniformly. Rows are then drawn uniformly with replacement.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{Batch, Objective, TrainingExample};
use crate::corpus::CorpusRegistry;
use crate::error::{Error, Result};
use crate::mass::{build_mass_example, MaskSpec};
use crate::subword::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    pub temperature: f64,
    pub mono_ratio: f64,
    pub batch_size: usize,
    /// Token budget per side, counting the `<2xx>` tag.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self {
            temperature: 5.0,
            mono_ratio: 0.5,
            batch_size: 32,
            max_len: 64,
            seed: 0,
        }
    }
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.mono_ratio) {
            return Err(Error::Config(format!("mono_ratio {} outside [0, 1]", self.mono_ratio)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must leave room for the tag and one token".into()));
        }
        Ok(())
    }
}

/// Temperature-scaled sampling probabilities `p_i = n_i^(1/T) / Σ_k n_k^(1/T)`.
pub fn language_probabilities<K: Ord + Clone>(
    sizes: &BTreeMap<K, usize>,
    temperature: f64,
) -> Result<BTreeMap<K, f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature {temperature} must be > 0")));
    }
    if sizes.values().any(|&n| n == 0) {
        return Err(Error::Config("zero-size store in temperature sampling".into()));
    }
    let Some(max) = sizes.values().max() else {
        return Ok(BTreeMap::new());
    };
    let log_max = (*max as f64).ln();
    let weights: Vec<f64> = sizes
        .values()
        .map(|&n| (((n as f64).ln() - log_max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    Ok(sizes
        .keys()
        .cloned()
        .zip(weights.into_iter().map(|w| w / total))
        .collect())
}

/// The sampling unit a batch was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Draw {
    Parallel(usize),
    Mono(usize),
}

#[derive(Debug, Clone)]
struct Direction {
    name: String,
    tag: u32,
    pairs: Vec<(Vec<u32>, Vec<u32>)>,
}

#[derive(Debug, Clone)]
struct MonoSource {
    lang: String,
    tag: u32,
    /// Only sentences long enough to mask.
    sentences: Vec<Vec<u32>>,
}

/// Serializable position of a batch stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    pub rng: ChaCha8Rng,
    pub batches: u64,
}

#[derive(Debug, Clone)]
pub struct Sampler {
    policy: SamplingPolicy,
    mask: MaskSpec,
    directions: Vec<Direction>,
    direction_probs: Vec<f64>,
    direction_dist: Option<WeightedIndex<f64>>,
    mono: Vec<MonoSource>,
    random_ids: std::ops::Range<u32>,
    rng: ChaCha8Rng,
    batches: u64,
}

fn truncate(mut ids: Vec<u32>, budget: usize) -> Vec<u32> {
    ids.truncate(budget);
    ids
}

impl Sampler {
    /// Encode the registry once and set up the stream at `policy.seed`.
    ///
    /// Every parallel store contributes two directions with the store's size.
    pub fn new(
        registry: &CorpusRegistry,
        policy: SamplingPolicy,
        mask: MaskSpec,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        policy.validate()?;
        mask.validate()?;
        let budget = policy.max_len - 1;
        let tag = |lang: &str| {
            vocab
                .tag_id(lang)
                .ok_or_else(|| Error::Config(format!("vocabulary has no tag for language {lang}")))
        };

        let mut directions = Vec::new();
        let mut sizes = BTreeMap::new();
        if policy.mono_ratio < 1.0 {
            for store in registry.parallel() {
                if store.is_empty() {
                    return Err(Error::EmptyCorpus(format!(
                        "parallel store {}-{}",
                        store.src_lang, store.tgt_lang
                    )));
                }
                let encoded: Vec<(Vec<u32>, Vec<u32>)> = store
                    .pairs
                    .iter()
                    .map(|(s, t)| {
                        (
                            truncate(vocab.encode(s), budget),
                            truncate(vocab.encode(t), budget),
                        )
                    })
                    .collect();
                let flipped = encoded.iter().map(|(s, t)| (t.clone(), s.clone())).collect();
                for (src, tgt, pairs) in [
                    (&store.src_lang, &store.tgt_lang, encoded),
                    (&store.tgt_lang, &store.src_lang, flipped),
                ] {
                    let name = format!("{src}-{tgt}");
                    sizes.insert(directions.len(), store.len());
                    directions.push(Direction {
                        name,
                        tag: tag(tgt)?,
                        pairs,
                    });
                }
            }
            if directions.is_empty() {
                return Err(Error::Config(
                    "mono_ratio < 1 requires at least one parallel store".into(),
                ));
            }
        }
        let direction_probs: Vec<f64> = language_probabilities(&sizes, policy.temperature)?
            .into_values()
            .collect();
        let direction_dist = if direction_probs.is_empty() {
            None
        } else {
            Some(
                WeightedIndex::new(&direction_probs)
                    .map_err(|e| Error::Config(format!("direction weights: {e}")))?,
            )
        };

        let mut mono = Vec::new();
        if policy.mono_ratio > 0.0 {
            for store in registry.mono() {
                let sentences: Vec<Vec<u32>> = store
                    .sentences
                    .iter()
                    .map(|s| truncate(vocab.encode(s), budget))
                    .filter(|ids| ids.len() >= mask.min_len)
                    .collect();
                if sentences.is_empty() {
                    return Err(Error::EmptyCorpus(format!(
                        "monolingual store {} has no sentence of at least {} tokens",
                        store.lang, mask.min_len
                    )));
                }
                mono.push(MonoSource {
                    lang: store.lang.clone(),
                    tag: tag(&store.lang)?,
                    sentences,
                });
            }
            if mono.is_empty() {
                return Err(Error::Config(
                    "mono_ratio > 0 requires at least one monolingual store".into(),
                ));
            }
        }

        Ok(Self {
            policy,
            mask,
            directions,
            direction_probs,
            direction_dist,
            mono,
            random_ids: vocab.first_regular_id()..vocab.len() as u32,
            rng: ChaCha8Rng::seed_from_u64(policy.seed),
            batches: 0,
        })
    }

    pub fn policy(&self) -> &SamplingPolicy {
        &self.policy
    }

    /// Direction names with their sampling probabilities.
    pub fn direction_probabilities(&self) -> Vec<(String, f64)> {
        self.directions
            .iter()
            .map(|d| d.name.clone())
            .zip(self.direction_probs.iter().copied())
            .collect()
    }

    pub fn mono_languages(&self) -> Vec<String> {
        self.mono.iter().map(|m| m.lang.clone()).collect()
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            rng: self.rng.clone(),
            batches: self.batches,
        }
    }

    pub fn restore(&mut self, state: SamplerState) {
        self.rng = state.rng;
        self.batches = state.batches;
    }

    fn draw_header(&self, rng: &mut ChaCha8Rng) -> Draw {
        let mono = match (self.direction_dist.is_some(), self.mono.is_empty()) {
            (true, true) => false,
            (false, false) => true,
            _ => rng.gen::<f64>() < self.policy.mono_ratio,
        };
        if mono {
            Draw::Mono(rng.gen_range(0..self.mono.len()))
        } else {
            let dist = self.direction_dist.as_ref().expect("parallel directions present");
            Draw::Parallel(dist.sample(rng))
        }
    }

    pub fn next_batch(&mut self) -> Batch {
        let mut rng = self.rng.clone();
        let batch = match self.draw_header(&mut rng) {
            Draw::Parallel(d) => {
                let dir = &self.directions[d];
                let examples = (0..self.policy.batch_size)
                    .map(|_| {
                        let (src, tgt) = &dir.pairs[rng.gen_range(0..dir.pairs.len())];
                        TrainingExample::translation(dir.tag, src, tgt)
                    })
                    .collect();
                Batch::from_examples(Objective::Translation, dir.name.clone(), examples)
            }
            Draw::Mono(l) => {
                let src = &self.mono[l];
                let examples = (0..self.policy.batch_size)
                    .map(|_| {
                        let tokens = &src.sentences[rng.gen_range(0..src.sentences.len())];
                        build_mass_example(tokens, src.tag, &self.mask, self.random_ids.clone(), &mut rng)
                            .expect("sentences are pre-filtered by min_len")
                            .example
                    })
                    .collect();
                Batch::from_examples(Objective::Mass, src.lang.clone(), examples)
            }
        };
        self.rng = rng;
        self.batches += 1;
        batch
    }

    /// Empirical frequencies over `n_draws` batch headers from a fresh
    /// stream at the policy seed.
    pub fn sample_stats(&self, n_draws: usize) -> SampleStats {
        let mut rng = ChaCha8Rng::seed_from_u64(self.policy.seed);
        let mut dir_counts = vec![0usize; self.directions.len()];
        let mut mono_counts = vec![0usize; self.mono.len()];
        for _ in 0..n_draws {
            match self.draw_header(&mut rng) {
                Draw::Parallel(d) => dir_counts[d] += 1,
                Draw::Mono(l) => mono_counts[l] += 1,
            }
        }
        let n_par: usize = dir_counts.iter().sum();
        let n_mono: usize = mono_counts.iter().sum();
        let frac = |c: usize, n: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };

        let mut directions = BTreeMap::new();
        let mut pairs = BTreeMap::new();
        for (dir, &c) in self.directions.iter().zip(&dir_counts) {
            directions.insert(dir.name.clone(), frac(c, n_par));
            let mut langs: Vec<&str> = dir.name.split('-').collect();
            langs.sort_unstable();
            *pairs.entry(langs.join("-")).or_insert(0.0) += frac(c, n_par);
        }
        let languages = self
            .mono
            .iter()
            .zip(&mono_counts)
            .map(|(m, &c)| (m.lang.clone(), frac(c, n_mono)))
            .collect();
        SampleStats {
            draws: n_draws,
            mono_fraction: frac(n_mono, n_draws),
            directions,
            pairs,
            languages,
            expected_directions: self.direction_probabilities().into_iter().collect(),
        }
    }
}

/// Output of [`Sampler::sample_stats`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub draws: usize,
    pub mono_fraction: f64,
    /// Frequency of each direction among parallel draws.
    pub directions: BTreeMap<String, f64>,
    /// Directions of one store summed, keyed by sorted language pair.
    pub pairs: BTreeMap<String, f64>,
    /// Frequency of each language among monolingual draws.
    pub languages: BTreeMap<String, f64>,
    pub expected_directions: BTreeMap<String, f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{MonoStore, ParallelStore};
    use crate::subword::train_vocab;

    fn sizes(pairs: &[(&'static str, usize)]) -> BTreeMap<&'static str, usize> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn probabilities_examples() {
        let p = language_probabilities(&sizes(&[("A", 100), ("B", 3200)]), 5.0).unwrap();
        assert!((p["A"] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p["B"] - 2.0 / 3.0).abs() < 1e-12);
        let p = language_probabilities(&sizes(&[("A", 100), ("B", 300)]), 1.0).unwrap();
        assert!((p["A"] - 0.25).abs() < 1e-12);
        let p = language_probabilities(&sizes(&[("A", 1), ("B", 1_000_000), ("C", 7)]), 1e9).unwrap();
        for v in p.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
        assert!(language_probabilities(&sizes(&[("A", 0)]), 5.0).is_err());
        assert!(language_probabilities(&sizes(&[("A", 1)]), 0.0).is_err());
    }

    fn registry() -> (CorpusRegistry, Vocabulary) {
        let mut r = CorpusRegistry::new();
        let pairs: Vec<(String, String)> = (0..20)
            .map(|i| (format!("a{i} b c"), format!("x y{i}")))
            .collect();
        r.add_parallel(ParallelStore::new("aa", "bb", pairs).unwrap());
        r.add_mono(MonoStore {
            lang: "aa".into(),
            sentences: (0..30).map(|i| format!("a{i} b c d")).collect(),
        });
        let v = train_vocab(r.all_text(), 60, &["aa".into(), "bb".into()]).unwrap();
        (r, v)
    }

    #[test]
    fn degenerate_mono_ratios() {
        let (r, v) = registry();
        for (ratio, want) in [(0.0, Objective::Translation), (1.0, Objective::Mass)] {
            let policy = SamplingPolicy {
                mono_ratio: ratio,
                batch_size: 4,
                ..Default::default()
            };
            let mut s = Sampler::new(&r, policy, MaskSpec::default(), &v).unwrap();
            for _ in 0..50 {
                assert_eq!(s.next_batch().objective, want);
            }
        }
    }

    #[test]
    fn replay_from_saved_state() {
        let (r, v) = registry();
        let policy = SamplingPolicy {
            batch_size: 3,
            seed: 11,
            ..Default::default()
        };
        let mut a = Sampler::new(&r, policy, MaskSpec::default(), &v).unwrap();
        let mut b = Sampler::new(&r, policy, MaskSpec::default(), &v).unwrap();
        for _ in 0..10 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
        let saved = a.state();
        let json = serde_json::to_string(&saved).unwrap();
        let next: Vec<Batch> = (0..5).map(|_| a.next_batch()).collect();
        b.restore(serde_json::from_str(&json).unwrap());
        let replay: Vec<Batch> = (0..5).map(|_| b.next_batch()).collect();
        assert_eq!(next, replay);
    }

    #[test]
    fn truncation_counts_the_tag() {
        let (r, v) = registry();
        let policy = SamplingPolicy {
            max_len: 3,
            mono_ratio: 0.5,
            batch_size: 8,
            ..Default::default()
        };
        let mut s = Sampler::new(&r, policy, MaskSpec::default(), &v).unwrap();
        for _ in 0..20 {
            let b = s.next_batch();
            // tag + at most two tokens + eos
            assert!(b.enc_len() <= 4, "{}", b.header());
        }
    }

    #[test]
    fn missing_sources_are_rejected() {
        let (mut r, v) = registry();
        r.remove_mono("aa");
        let policy = SamplingPolicy::default();
        assert!(Sampler::new(&r, policy, MaskSpec::default(), &v).is_err());
        let policy = SamplingPolicy {
            mono_ratio: 0.0,
            ..Default::default()
        };
        assert!(Sampler::new(&r, policy, MaskSpec::default(), &v).is_ok());
    }
}
