//! Synthetic cipher languages.
//!
//! A base language is a Zipf-distributed bag of pseudo-words. Every cipher
//! language is a bijective word substitution followed by a deterministic
//! reordering of positions, so each cipher sentence has exactly one correct
//! translation back into the base language and into every other cipher.

use std::collections::HashMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{MonoStore, ParallelStore};
use crate::error::{Error, Result};

const CONSONANTS: &[u8] = b"bdfghklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Largest base vocabulary expressible with two-syllable words.
pub const MAX_BASE_VOCAB: usize = (CONSONANTS.len() * VOWELS.len()).pow(2);

/// Position permutation applied after word substitution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reorder {
    None,
    /// Reverse consecutive windows of the given width; `None` reverses the
    /// whole sentence.
    ReverseWindow(Option<usize>),
    /// Swap positions (0,1), (2,3), ...
    AdjacentSwap,
}

impl Reorder {
    pub fn apply<T: Clone>(&self, tokens: &[T]) -> Vec<T> {
        let mut out = tokens.to_vec();
        match *self {
            Reorder::None => {}
            Reorder::ReverseWindow(w) => {
                let w = w.unwrap_or(usize::MAX).max(1);
                for chunk in out.chunks_mut(w) {
                    chunk.reverse();
                }
            }
            Reorder::AdjacentSwap => {
                for pair in out.chunks_mut(2) {
                    pair.reverse();
                }
            }
        }
        out
    }

    /// Every supported reordering is an involution.
    pub fn invert<T: Clone>(&self, tokens: &[T]) -> Vec<T> {
        self.apply(tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CipherSpec {
    pub lang: String,
    /// Seed of the word permutation; `None` keeps the base lexicon unchanged.
    #[serde(default)]
    pub lexicon_seed: Option<u64>,
    /// Language whose surface forms are borrowed for a share of the lexicon.
    #[serde(default)]
    pub relative: Option<String>,
    #[serde(default)]
    pub shared_fraction: f64,
    #[serde(default = "default_reorder")]
    pub reorder: Reorder,
}

fn default_reorder() -> Reorder {
    Reorder::None
}

impl CipherSpec {
    pub fn identity(lang: &str) -> Self {
        Self {
            lang: lang.to_string(),
            lexicon_seed: None,
            relative: None,
            shared_fraction: 0.0,
            reorder: Reorder::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(Error::Config(format!(
                "shared_fraction {} for {} is outside [0, 1]",
                self.shared_fraction, self.lang
            )));
        }
        if self.lang.is_empty() || !self.lang.chars().all(|c| c.is_ascii_lowercase()) {
            return Err(Error::Config(format!(
                "language code {:?} must be lowercase ascii letters",
                self.lang
            )));
        }
        if self.shared_fraction > 0.0 && self.relative.is_none() {
            return Err(Error::Config(format!(
                "{} has shared_fraction > 0 but no relative language",
                self.lang
            )));
        }
        if let Reorder::ReverseWindow(Some(0)) = self.reorder {
            return Err(Error::Config("reverse window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Surface form of base word `i`: two consonant-vowel syllables.
pub fn base_word(i: usize) -> String {
    let syllables = CONSONANTS.len() * VOWELS.len();
    let syl = |k: usize| {
        let c = CONSONANTS[k / VOWELS.len()] as char;
        let v = VOWELS[k % VOWELS.len()] as char;
        format!("{c}{v}")
    };
    format!("{}{}", syl(i / syllables), syl(i % syllables))
}

/// Bijection from base word ids to a language's surface forms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    forms: Vec<String>,
    index: HashMap<String, usize>,
}

impl Lexicon {
    pub fn base(size: usize) -> Result<Self> {
        check_base_size(size)?;
        Self::from_forms((0..size).map(base_word).collect())
    }

    fn from_forms(forms: Vec<String>) -> Result<Self> {
        let index: HashMap<String, usize> =
            forms.iter().enumerate().map(|(i, f)| (f.clone(), i)).collect();
        if index.len() != forms.len() {
            return Err(Error::Config("lexicon surface forms are not distinct".into()));
        }
        Ok(Self { forms, index })
    }

    /// Build the lexicon of `spec`. `relative` must be the lexicon of
    /// `spec.relative` when `spec.shared_fraction > 0`.
    pub fn for_spec(spec: &CipherSpec, size: usize, relative: Option<&Lexicon>) -> Result<Self> {
        spec.validate()?;
        check_base_size(size)?;
        let Some(seed) = spec.lexicon_seed else {
            return Self::base(size);
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..size).collect();
        perm.shuffle(&mut rng);
        let mut forms: Vec<String> = perm
            .iter()
            .map(|&j| format!("{}{}", base_word(j), spec.lang))
            .collect();
        if spec.shared_fraction > 0.0 {
            let relative = relative.ok_or_else(|| {
                Error::Config(format!("{} needs the lexicon of its relative", spec.lang))
            })?;
            if relative.len() != size {
                return Err(Error::Config("relative lexicon has a different size".into()));
            }
            let n_shared = (spec.shared_fraction * size as f64).round() as usize;
            let mut meanings: Vec<usize> = (0..size).collect();
            meanings.shuffle(&mut rng);
            for &m in &meanings[..n_shared] {
                forms[m] = relative.forms[m].clone();
            }
        }
        Self::from_forms(forms)
    }

    pub fn len(&self) -> usize {
        self.forms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forms.is_empty()
    }

    pub fn form(&self, id: usize) -> &str {
        &self.forms[id]
    }

    pub fn lookup(&self, form: &str) -> Option<usize> {
        self.index.get(form).copied()
    }
}

fn check_base_size(size: usize) -> Result<()> {
    if !(10..=MAX_BASE_VOCAB).contains(&size) {
        return Err(Error::Config(format!(
            "base vocabulary size {size} outside [10, {MAX_BASE_VOCAB}]"
        )));
    }
    Ok(())
}

/// A cipher language ready to encipher base-id sentences.
#[derive(Debug, Clone)]
pub struct Cipher {
    pub spec: CipherSpec,
    pub lexicon: Lexicon,
}

impl Cipher {
    pub fn new(spec: CipherSpec, size: usize, relative: Option<&Lexicon>) -> Result<Self> {
        let lexicon = Lexicon::for_spec(&spec, size, relative)?;
        Ok(Self { spec, lexicon })
    }

    /// Render a sentence of base word ids in this language.
    pub fn render(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = self
            .spec
            .reorder
            .apply(ids)
            .into_iter()
            .map(|i| self.lexicon.form(i))
            .collect();
        words.join(" ")
    }

    /// Recover the base word ids of a sentence rendered by this cipher.
    pub fn parse(&self, sentence: &str) -> Option<Vec<usize>> {
        let ids: Option<Vec<usize>> = sentence
            .split_whitespace()
            .map(|w| self.lexicon.lookup(w))
            .collect();
        Some(self.spec.reorder.invert(&ids?))
    }
}

/// Shape of the generated base-language text.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_sentences: usize,
    pub len_range: (usize, usize),
    pub base_vocab_size: usize,
    pub zipf_s: f64,
}

impl SynthParams {
    pub fn validate(&self, max_len: usize) -> Result<()> {
        check_base_size(self.base_vocab_size)?;
        let (lo, hi) = self.len_range;
        if lo < 1 || lo > hi || hi > max_len {
            return Err(Error::Config(format!(
                "len_range ({lo}, {hi}) must satisfy 1 <= lo <= hi <= {max_len}"
            )));
        }
        if !(self.zipf_s.is_finite() && self.zipf_s >= 0.0) {
            return Err(Error::Config(format!("zipf exponent {} invalid", self.zipf_s)));
        }
        Ok(())
    }
}

/// Zipf-distributed base sentences as word-id sequences.
pub struct SentenceSource {
    words: WeightedIndex<f64>,
    len_range: (usize, usize),
    rng: ChaCha8Rng,
}

impl SentenceSource {
    pub fn new(params: &SynthParams, seed: u64) -> Result<Self> {
        params.validate(usize::MAX)?;
        let weights: Vec<f64> = (1..=params.base_vocab_size)
            .map(|rank| (rank as f64).powf(-params.zipf_s))
            .collect();
        let words = WeightedIndex::new(weights)
            .map_err(|e| Error::Config(format!("zipf weights: {e}")))?;
        Ok(Self {
            words,
            len_range: params.len_range,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn sentence(&mut self) -> Vec<usize> {
        let len = self.rng.gen_range(self.len_range.0..=self.len_range.1);
        (0..len).map(|_| self.words.sample(&mut self.rng)).collect()
    }
}

/// Output of [`generate_cipher_corpus`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthCorpus {
    pub base: MonoStore,
    pub cipher: MonoStore,
    /// Pairs stored as `(base, cipher)`.
    pub parallel: ParallelStore,
}

/// Draw `params.n_sentences` base sentences and their exact cipher
/// translations. All randomness comes from `seed` and the lexicon seed.
pub fn generate_cipher_corpus(
    spec: &CipherSpec,
    base_lang: &str,
    relative: Option<&Lexicon>,
    params: &SynthParams,
    seed: u64,
) -> Result<SynthCorpus> {
    spec.validate()?;
    params.validate(usize::MAX)?;
    let base = Cipher::new(CipherSpec::identity(base_lang), params.base_vocab_size, None)?;
    let cipher = Cipher::new(spec.clone(), params.base_vocab_size, relative)?;
    let mut source = SentenceSource::new(params, seed)?;
    let mut pairs = Vec::with_capacity(params.n_sentences);
    for _ in 0..params.n_sentences {
        let ids = source.sentence();
        pairs.push((base.render(&ids), cipher.render(&ids)));
    }
    Ok(SynthCorpus {
        base: MonoStore {
            lang: base_lang.to_string(),
            sentences: pairs.iter().map(|(b, _)| b.clone()).collect(),
        },
        cipher: MonoStore {
            lang: spec.lang.clone(),
            sentences: pairs.iter().map(|(_, c)| c.clone()).collect(),
        },
        parallel: ParallelStore::new(base_lang, &spec.lang, pairs)?,
    })
}
