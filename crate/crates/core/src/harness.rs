//! Experiment orchestration: synthetic suites, arms, runs and reports.
//!
//! An experiment trains every arm once per seed on data drawn from one
//! synthetic suite, scores the configured directions on a held-out test set
//! that is aligned across all languages, and aggregates BLEU by median over
//! seeds.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batch::{Batch, Objective, TrainingExample};
use crate::cipher::{Cipher, CipherSpec, Lexicon, Reorder, SentenceSource, SynthParams};
use crate::corpus::{load_mono, load_parallel, write_lines, CorpusRegistry, MonoStore, ParallelStore};
use crate::error::{Error, Result};
use crate::eval::{corpus_bleu, pivot_translate, score_direction, BleuResult, DecodeSettings, Smoothing};
use crate::mass::MaskSpec;
use crate::model::ModelConfig;
use crate::sampler::SamplingPolicy;
use crate::subword::{train_vocab, Vocabulary};
use crate::trainer::{load_checkpoint, train, TrainConfig, TrainJob, TrainOptions};

/// Comma-separated seed list that replaces `ExperimentConfig::seeds`.
pub const SEEDS_ENV: &str = "MLMASS_SEEDS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageConfig {
    #[serde(flatten)]
    pub cipher: CipherSpec,
    /// Sentence pairs with the base language.
    pub parallel: usize,
    pub mono: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub base_lang: String,
    pub base_mono: usize,
    pub base_vocab_size: usize,
    pub len_range: (usize, usize),
    pub zipf_s: f64,
    pub languages: Vec<LanguageConfig>,
    pub test_size: usize,
    pub dev_size: usize,
    /// Target size of the shared subword vocabulary.
    pub subword_vocab: usize,
    pub data_seed: u64,
}

fn cipher(lang: &str, seed: u64, reorder: Reorder, parallel: usize) -> LanguageConfig {
    LanguageConfig {
        cipher: CipherSpec {
            lang: lang.into(),
            lexicon_seed: Some(seed),
            relative: None,
            shared_fraction: 0.0,
            reorder,
        },
        parallel,
        mono: 10_000,
    }
}

impl Default for SuiteConfig {
    /// Base `en` plus four ciphers with 10000/10000/2000/200 pairs; the
    /// smallest borrows half its lexicon from the first.
    fn default() -> Self {
        let mut low = cipher("xd", 4, Reorder::AdjacentSwap, 200);
        low.cipher.relative = Some("xa".into());
        low.cipher.shared_fraction = 0.5;
        Self {
            base_lang: "en".into(),
            base_mono: 10_000,
            base_vocab_size: 300,
            len_range: (3, 10),
            zipf_s: 1.0,
            languages: vec![
                cipher("xa", 1, Reorder::AdjacentSwap, 10_000),
                cipher("xb", 2, Reorder::ReverseWindow(Some(3)), 10_000),
                cipher("xc", 3, Reorder::None, 2_000),
                low,
            ],
            test_size: 500,
            dev_size: 200,
            subword_vocab: 4_000,
            data_seed: 0,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        let params = self.synth_params(1);
        params.validate(usize::MAX)?;
        let mut seen = BTreeSet::from([self.base_lang.clone()]);
        for l in &self.languages {
            l.cipher.validate()?;
            if let Some(rel) = &l.cipher.relative {
                if !seen.contains(rel) || rel == &self.base_lang {
                    return Err(Error::Config(format!(
                        "{}: relative {rel} must be a cipher language listed earlier",
                        l.cipher.lang
                    )));
                }
            }
            if !seen.insert(l.cipher.lang.clone()) {
                return Err(Error::Config(format!("language {} listed twice", l.cipher.lang)));
            }
        }
        if self.test_size == 0 {
            return Err(Error::Config("test_size must be positive".into()));
        }
        Ok(())
    }

    fn synth_params(&self, n: usize) -> SynthParams {
        SynthParams {
            n_sentences: n,
            len_range: self.len_range,
            base_vocab_size: self.base_vocab_size,
            zipf_s: self.zipf_s,
        }
    }

    pub fn languages(&self) -> Vec<String> {
        std::iter::once(self.base_lang.clone())
            .chain(self.languages.iter().map(|l| l.cipher.lang.clone()))
            .collect()
    }

    fn language(&self, lang: &str) -> Option<&LanguageConfig> {
        self.languages.iter().find(|l| l.cipher.lang == lang)
    }
}

/// Seed of one data stream, independent across `(data_seed, role, index)`.
fn stream_seed(data_seed: u64, role: &str, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(data_seed.to_le_bytes());
    h.update(role.as_bytes());
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes([d[0], d[1], d[2], d[3], d[4], d[5], d[6], d[7]])
}

/// Generated corpora for every language plus held-out aligned sentences.
#[derive(Debug, Clone)]
pub struct Suite {
    pub config: SuiteConfig,
    /// Every training store: all parallel data and all monolingual data.
    pub registry: CorpusRegistry,
    pub vocab: Vocabulary,
    ciphers: BTreeMap<String, Cipher>,
    test: Vec<Vec<usize>>,
    dev: Vec<Vec<usize>>,
}

impl Suite {
    pub fn build(config: &SuiteConfig) -> Result<Self> {
        config.validate()?;
        let size = config.base_vocab_size;
        let mut ciphers = BTreeMap::new();
        ciphers.insert(
            config.base_lang.clone(),
            Cipher::new(CipherSpec::identity(&config.base_lang), size, None)?,
        );
        let mut lexicons: BTreeMap<String, Lexicon> = BTreeMap::new();
        for l in &config.languages {
            let relative = l.cipher.relative.as_ref().and_then(|r| lexicons.get(r));
            let c = Cipher::new(l.cipher.clone(), size, relative)?;
            lexicons.insert(l.cipher.lang.clone(), c.lexicon.clone());
            ciphers.insert(l.cipher.lang.clone(), c);
        }
        let base = &ciphers[&config.base_lang];
        let draw = |role: &str, index: usize, n: usize| -> Result<Vec<Vec<usize>>> {
            let mut src = SentenceSource::new(&config.synth_params(n), stream_seed(config.data_seed, role, index))?;
            Ok((0..n).map(|_| src.sentence()).collect())
        };

        let mut registry = CorpusRegistry::new();
        for (i, l) in config.languages.iter().enumerate() {
            let c = &ciphers[&l.cipher.lang];
            if l.parallel > 0 {
                let pairs = draw("parallel", i, l.parallel)?
                    .iter()
                    .map(|ids| (base.render(ids), c.render(ids)))
                    .collect();
                registry.add_parallel(ParallelStore::new(&config.base_lang, &l.cipher.lang, pairs)?);
            }
            if l.mono > 0 {
                let sentences = draw("mono", i, l.mono)?.iter().map(|ids| c.render(ids)).collect();
                registry.add_mono(MonoStore {
                    lang: l.cipher.lang.clone(),
                    sentences,
                });
            }
        }
        if config.base_mono > 0 {
            let sentences = draw("mono", usize::MAX, config.base_mono)?
                .iter()
                .map(|ids| base.render(ids))
                .collect();
            registry.add_mono(MonoStore {
                lang: config.base_lang.clone(),
                sentences,
            });
        }

        let seen: HashSet<&str> = registry.all_text().collect();
        let held_out = |role: &str, n: usize| -> Result<Vec<Vec<usize>>> {
            let mut src = SentenceSource::new(&config.synth_params(n), stream_seed(config.data_seed, role, 0))?;
            let mut out = Vec::with_capacity(n);
            let mut tries = 0;
            while out.len() < n {
                tries += 1;
                if tries > 100 * n + 1000 {
                    return Err(Error::Config(format!(
                        "could not draw {n} {role} sentences disjoint from training data"
                    )));
                }
                let ids = src.sentence();
                if ciphers.values().all(|c| !seen.contains(c.render(&ids).as_str())) {
                    out.push(ids);
                }
            }
            Ok(out)
        };
        let test = held_out("test", config.test_size)?;
        let dev = held_out("dev", config.dev_size)?;
        let vocab = train_vocab(registry.all_text(), config.subword_vocab, &config.languages())?;
        Ok(Self {
            config: config.clone(),
            registry,
            vocab,
            ciphers,
            test,
            dev,
        })
    }

    fn aligned(&self, ids: &[Vec<usize>], src: &str, tgt: &str) -> Result<ParallelStore> {
        let get = |l: &str| {
            self.ciphers
                .get(l)
                .ok_or_else(|| Error::Config(format!("unknown language {l}")))
        };
        let (s, t) = (get(src)?, get(tgt)?);
        ParallelStore::new(src, tgt, ids.iter().map(|i| (s.render(i), t.render(i))).collect())
    }

    /// The held-out test sentences rendered in `lang`.
    pub fn test_sentences(&self, lang: &str) -> Result<Vec<String>> {
        let c = self
            .ciphers
            .get(lang)
            .ok_or_else(|| Error::Config(format!("unknown language {lang}")))?;
        Ok(self.test.iter().map(|ids| c.render(ids)).collect())
    }

    /// Held-out test pairs for any direction, aligned across languages.
    pub fn test_set(&self, src: &str, tgt: &str) -> Result<ParallelStore> {
        self.aligned(&self.test, src, tgt)
    }

    pub fn dev_set(&self, src: &str, tgt: &str) -> Result<ParallelStore> {
        self.aligned(&self.dev, src, tgt)
    }

    /// Write every store as plain text plus a `registry.json` describing
    /// them, and the test sets of all base-centric directions.
    pub fn write(&self, dir: &Path) -> Result<RegistryFiles> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = RegistryFiles {
            max_len: None,
            parallel: Vec::new(),
            mono: Vec::new(),
        };
        for p in self.registry.parallel() {
            let stem = format!("train.{}-{}", p.src_lang, p.tgt_lang);
            let src = format!("{stem}.{}", p.src_lang);
            let tgt = format!("{stem}.{}", p.tgt_lang);
            write_lines(dir.join(&src), p.pairs.iter().map(|(s, _)| s.as_str()))?;
            write_lines(dir.join(&tgt), p.pairs.iter().map(|(_, t)| t.as_str()))?;
            files.parallel.push(ParallelFiles {
                src_lang: p.src_lang.clone(),
                tgt_lang: p.tgt_lang.clone(),
                src: src.into(),
                tgt: tgt.into(),
            });
        }
        for m in self.registry.mono() {
            let name = format!("mono.{}", m.lang);
            write_lines(dir.join(&name), m.sentences.iter().map(String::as_str))?;
            files.mono.push(MonoFiles {
                lang: m.lang.clone(),
                path: name.into(),
            });
        }
        for l in self.config.languages() {
            let lines = self.test_sentences(&l)?;
            write_lines(dir.join(format!("test.{l}")), lines.iter().map(String::as_str))?;
        }
        self.vocab.save(dir.join("vocab.txt"))?;
        let path = dir.join("registry.json");
        fs::write(&path, serde_json::to_string_pretty(&files)?).map_err(|e| Error::io(&path, e))?;
        Ok(files)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelFiles {
    pub src_lang: String,
    pub tgt_lang: String,
    pub src: PathBuf,
    pub tgt: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonoFiles {
    pub lang: String,
    pub path: PathBuf,
}

/// On-disk description of a corpus registry. Relative paths resolve
/// against the directory of the description file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryFiles {
    /// Whitespace-token limit applied while loading.
    #[serde(default)]
    pub max_len: Option<usize>,
    #[serde(default)]
    pub parallel: Vec<ParallelFiles>,
    #[serde(default)]
    pub mono: Vec<MonoFiles>,
}

impl RegistryFiles {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn load(&self, root: &Path) -> Result<CorpusRegistry> {
        let max_len = self.max_len.unwrap_or(usize::MAX);
        let mut r = CorpusRegistry::new();
        for p in &self.parallel {
            let (store, report) = load_parallel(root.join(&p.src), root.join(&p.tgt), &p.src_lang, &p.tgt_lang, max_len)?;
            if report.dropped_long + report.dropped_empty > 0 {
                log::info!(
                    "{}-{}: dropped {} long and {} empty pairs",
                    p.src_lang,
                    p.tgt_lang,
                    report.dropped_long,
                    report.dropped_empty
                );
            }
            r.add_parallel(store);
        }
        for m in &self.mono {
            let (store, _) = load_mono(root.join(&m.path), &m.lang, max_len)?;
            r.add_mono(store);
        }
        Ok(r)
    }
}

/// A standalone training run over corpora on disk: the input of the
/// `train` and `sample-stats` commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    /// Path of a [`RegistryFiles`] document.
    pub registry: PathBuf,
    /// Existing vocabulary; trained from the registry when absent.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    #[serde(default = "default_subword_vocab")]
    pub vocab_size: usize,
    #[serde(flatten)]
    pub job: TrainJob,
}

fn default_subword_vocab() -> usize {
    4_000
}

impl TrainSpec {
    /// Read a spec; relative paths inside resolve against its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: Self = serde_json::from_str(&text)?;
        let root = path.parent().unwrap_or(Path::new("."));
        spec.registry = root.join(&spec.registry);
        spec.vocab = spec.vocab.map(|v| root.join(v));
        Ok(spec)
    }

    /// Load the corpora and vocabulary, fixing `job.model.vocab_size`.
    pub fn prepare(&self) -> Result<(CorpusRegistry, Vocabulary, TrainJob)> {
        let files = RegistryFiles::read(&self.registry)?;
        let root = self.registry.parent().unwrap_or(Path::new("."));
        let registry = files.load(root)?;
        let vocab = match &self.vocab {
            Some(p) => Vocabulary::load(p)?,
            None => train_vocab(registry.all_text(), self.vocab_size, &registry.languages())?,
        };
        let mut job = self.job.clone();
        job.model.vocab_size = vocab.len();
        Ok((registry, vocab, job))
    }
}

/// Drop every parallel store touching `lang`; monolingual data stays.
pub fn build_leave_one_out(registry: &CorpusRegistry, lang: &str) -> CorpusRegistry {
    let mut out = registry.clone();
    let touching: Vec<(String, String)> = registry
        .parallel()
        .filter(|p| p.touches(lang))
        .map(|p| (p.src_lang.clone(), p.tgt_lang.clone()))
        .collect();
    if touching.is_empty() {
        log::warn!("leave-one-out: {lang} has no parallel data to remove");
    }
    for (s, t) in touching {
        out.remove_parallel(&s, &t);
    }
    out
}

fn default_true() -> bool {
    true
}

/// One training recipe compared in an experiment.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "arm")]
pub enum Arm {
    /// One model per base-centric pair, trained on that pair alone.
    Bilingual,
    /// All parallel data, no monolingual objective.
    Multilingual,
    /// All parallel data co-trained with MASS on all monolingual data.
    MultilingualMono,
    /// Parallel data of `lang` removed. With `mono`, co-trained with MASS
    /// on all monolingual data; without, parallel data only.
    LeaveOneOut {
        lang: String,
        #[serde(default = "default_true")]
        mono: bool,
    },
    /// MASS only, on the monolingual data of `lang` and the base language.
    MonoOnly { lang: String },
}

impl Arm {
    pub fn name(&self) -> String {
        match self {
            Arm::Bilingual => "bilingual".into(),
            Arm::Multilingual => "multilingual".into(),
            Arm::MultilingualMono => "multilingual_mono".into(),
            Arm::LeaveOneOut { lang, mono: true } => format!("leave_one_out_{lang}"),
            Arm::LeaveOneOut { lang, mono: false } => format!("leave_one_out_{lang}_no_mono"),
            Arm::MonoOnly { lang } => format!("mono_only_{lang}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EvalDirection {
    pub src: String,
    pub tgt: String,
    /// Decode `src → pivot → tgt` instead of directly.
    #[serde(default)]
    pub pivot: Option<String>,
}

impl EvalDirection {
    pub fn direct(src: &str, tgt: &str) -> Self {
        Self {
            src: src.into(),
            tgt: tgt.into(),
            pivot: None,
        }
    }

    pub fn name(&self) -> String {
        match &self.pivot {
            None => format!("{}-{}", self.src, self.tgt),
            Some(p) => format!("{}-{}-{}", self.src, p, self.tgt),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub suite: SuiteConfig,
    pub arms: Vec<Arm>,
    pub policy: SamplingPolicy,
    #[serde(default)]
    pub mask: MaskSpec,
    /// `vocab_size` is replaced by the size of the suite vocabulary.
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub decode: DecodeSettings,
    pub directions: Vec<EvalDirection>,
    pub seeds: Vec<u64>,
    /// Also score the checkpoint with the lowest dev loss.
    #[serde(default)]
    pub evaluate_best: bool,
}

/// Parse a comma-separated seed list.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Config(format!("invalid seed {s:?} in {SEEDS_ENV}")))
        })
        .collect()
}

impl ExperimentConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Replace the seed list from [`SEEDS_ENV`] when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(text) = std::env::var(SEEDS_ENV) {
            self.seeds = parse_seeds(&text)?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.suite.validate()?;
        self.policy.validate()?;
        self.mask.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.policy.max_len + 1 > self.model.max_positions {
            return bad(format!(
                "max_len {} needs {} positions, model has {}",
                self.policy.max_len,
                self.policy.max_len + 1,
                self.model.max_positions
            ));
        }
        let langs: BTreeSet<String> = self.suite.languages().into_iter().collect();
        for arm in &self.arms {
            if let Arm::LeaveOneOut { lang, .. } | Arm::MonoOnly { lang } = arm {
                match self.suite.language(lang) {
                    None => return bad(format!("{}: {lang} is not a cipher language of the suite", arm.name())),
                    Some(l) if l.mono == 0 => {
                        return bad(format!("{}: {lang} has no monolingual data", arm.name()))
                    }
                    _ => {}
                }
            }
            if matches!(arm, Arm::MultilingualMono) && self.policy.mono_ratio <= 0.0 {
                return bad("multilingual_mono needs mono_ratio > 0".into());
            }
        }
        for d in &self.directions {
            for l in [&d.src, &d.tgt].into_iter().chain(&d.pivot) {
                if !langs.contains(l) {
                    return bad(format!("direction {}: unknown language {l}", d.name()));
                }
            }
            if d.src == d.tgt {
                return bad(format!("direction {} translates into its own language", d.name()));
            }
            if let Some(p) = &d.pivot {
                if p == &d.src || p == &d.tgt {
                    return bad(format!("direction {}: pivot must differ from both ends", d.name()));
                }
            }
        }
        Ok(())
    }
}

/// One model to train for an arm, and the directions it answers for.
struct ArmModel {
    name: String,
    registry: CorpusRegistry,
    mono_ratio: f64,
    directions: Vec<EvalDirection>,
}

fn with_mono(mut r: CorpusRegistry, all: &CorpusRegistry, langs: Option<&[&str]>) -> CorpusRegistry {
    for m in all.mono() {
        if langs.is_none_or(|ls| ls.contains(&m.lang.as_str())) {
            r.add_mono(m.clone());
        }
    }
    r
}

fn parallel_only(all: &CorpusRegistry) -> CorpusRegistry {
    let mut r = CorpusRegistry::new();
    for p in all.parallel() {
        r.add_parallel(p.clone());
    }
    r
}

/// Split an arm into models. Directions no model of the arm can serve are
/// returned separately with a reason.
fn arm_models(
    arm: &Arm,
    suite: &Suite,
    directions: &[EvalDirection],
    mono_ratio: f64,
) -> (Vec<ArmModel>, Vec<(EvalDirection, String)>) {
    let all = &suite.registry;
    let base = suite.config.base_lang.as_str();
    let single = |name: String, registry: CorpusRegistry, mono_ratio: f64| {
        (
            vec![ArmModel {
                name,
                registry,
                mono_ratio,
                directions: directions.to_vec(),
            }],
            Vec::new(),
        )
    };
    match arm {
        Arm::Multilingual => single("model".into(), parallel_only(all), 0.0),
        Arm::MultilingualMono => single("model".into(), with_mono(parallel_only(all), all, None), mono_ratio),
        Arm::LeaveOneOut { lang, mono } => {
            let r = build_leave_one_out(&parallel_only(all), lang);
            if *mono {
                single("model".into(), with_mono(r, all, None), mono_ratio)
            } else {
                single("model".into(), r, 0.0)
            }
        }
        Arm::MonoOnly { lang } => {
            let r = with_mono(CorpusRegistry::new(), all, Some(&[lang.as_str(), base]));
            single("model".into(), r, 1.0)
        }
        Arm::Bilingual => {
            let mut by_pair: BTreeMap<String, Vec<EvalDirection>> = BTreeMap::new();
            let mut skipped = Vec::new();
            for d in directions {
                let other = if d.src == base { &d.tgt } else { &d.src };
                if d.pivot.is_some() || (d.src != base && d.tgt != base) {
                    skipped.push((d.clone(), "bilingual models only cover base-centric direct pairs".into()));
                } else if all.parallel_store(base, other).is_none() {
                    skipped.push((d.clone(), format!("no parallel data for {base}-{other}")));
                } else {
                    by_pair.entry(other.clone()).or_default().push(d.clone());
                }
            }
            let models = by_pair
                .into_iter()
                .map(|(lang, dirs)| {
                    let mut r = CorpusRegistry::new();
                    r.add_parallel(all.parallel_store(base, &lang).expect("checked above").clone());
                    ArmModel {
                        name: format!("{base}-{lang}"),
                        registry: r,
                        mono_ratio: 0.0,
                        directions: dirs,
                    }
                })
                .collect();
            (models, skipped)
        }
    }
}

fn dev_batches(suite: &Suite, directions: &[EvalDirection], policy: &SamplingPolicy) -> Result<Vec<Batch>> {
    let vocab = &suite.vocab;
    let budget = policy.max_len.saturating_sub(1).max(1);
    let mut batches = Vec::new();
    for d in directions.iter().filter(|d| d.pivot.is_none()) {
        let set = suite.dev_set(&d.src, &d.tgt)?;
        let tag = vocab
            .tag_id(&d.tgt)
            .ok_or_else(|| Error::Config(format!("no tag for {}", d.tgt)))?;
        let examples: Vec<TrainingExample> = set
            .pairs
            .iter()
            .map(|(s, t)| {
                let mut s = vocab.encode(s);
                let mut t = vocab.encode(t);
                s.truncate(budget);
                t.truncate(budget);
                TrainingExample::translation(tag, &s, &t)
            })
            .collect();
        for chunk in examples.chunks(policy.batch_size.max(1)) {
            batches.push(Batch::from_examples(Objective::Translation, d.name(), chunk.to_vec()));
        }
    }
    Ok(batches)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Final,
    Best,
}

impl CheckpointKind {
    fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::Final => "final",
            CheckpointKind::Best => "best",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub arm: String,
    pub direction: String,
    pub seed: u64,
    pub checkpoint: CheckpointKind,
    pub result: Option<BleuResult>,
    /// Why `result` is missing.
    pub failure: Option<String>,
    pub hypotheses: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub arm: String,
    pub direction: String,
    pub checkpoint: CheckpointKind,
    /// Median BLEU over the seeds that succeeded.
    pub median_bleu: Option<f64>,
    pub succeeded: usize,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config_hash: String,
    pub build: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<Cell>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentReport {
    pub fn empty(name: &str) -> Self {
        Self {
            name: name.into(),
            config_hash: String::new(),
            build: build_id(),
            seeds: Vec::new(),
            cells: Vec::new(),
            summary: Vec::new(),
        }
    }

    pub fn median(&self, arm: &str, direction: &str, checkpoint: CheckpointKind) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.arm == arm && r.direction == direction && r.checkpoint == checkpoint)
            .and_then(|r| r.median_bleu)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn build_id() -> String {
    format!("mlmass {}", env!("CARGO_PKG_VERSION"))
}

/// Median of a non-empty sample; the mean of the middle pair when even.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn summarize(cells: &[Cell], seeds: usize) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String, CheckpointKind), Vec<f64>> = BTreeMap::new();
    for c in cells {
        let e = groups
            .entry((c.arm.clone(), c.direction.clone(), c.checkpoint))
            .or_default();
        if let Some(r) = &c.result {
            e.push(r.bleu);
        }
    }
    groups
        .into_iter()
        .map(|((arm, direction, checkpoint), v)| SummaryRow {
            arm,
            direction,
            checkpoint,
            median_bleu: median(&v),
            succeeded: v.len(),
            seeds,
        })
        .collect()
}

fn sort_cells(cells: &mut [Cell]) {
    cells.sort_by(|a, b| {
        (&a.arm, &a.direction, a.seed, a.checkpoint).cmp(&(&b.arm, &b.direction, b.seed, b.checkpoint))
    });
}

fn score(
    ckpt: &Path,
    suite: &Suite,
    d: &EvalDirection,
    decode: &DecodeSettings,
    hyp_path: &Path,
) -> Result<BleuResult> {
    let (params, vocab) = load_checkpoint(ckpt)?;
    let test = suite.test_set(&d.src, &d.tgt)?;
    let (result, hyps) = match &d.pivot {
        None => score_direction(&params, &vocab, &test, decode)?,
        Some(p) => {
            let srcs: Vec<&str> = test.pairs.iter().map(|(s, _)| s.as_str()).collect();
            let refs: Vec<&str> = test.pairs.iter().map(|(_, t)| t.as_str()).collect();
            let hyps = pivot_translate(&params, &vocab, &srcs, p, &d.tgt, decode)?;
            (corpus_bleu(&hyps, &refs, Smoothing::None)?, hyps)
        }
    };
    write_lines(hyp_path, hyps.iter().map(String::as_str))?;
    Ok(result)
}

/// Train every (arm, seed) and score every direction. Artifacts land under
/// `out/<arm>/seed-<seed>/<model>/`; the report is written to `out`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join("config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(config)?).map_err(|e| Error::io(&cfg_path, e))?;
    let suite = Suite::build(&config.suite)?;
    suite.write(&out.join("data"))?;
    log::info!(
        "suite ready: {} languages, vocabulary of {} pieces",
        suite.config.languages().len(),
        suite.vocab.len()
    );
    let model = ModelConfig {
        vocab_size: suite.vocab.len(),
        ..config.model
    };
    let kinds: &[CheckpointKind] = if config.evaluate_best {
        &[CheckpointKind::Final, CheckpointKind::Best]
    } else {
        &[CheckpointKind::Final]
    };

    let mut cells = Vec::new();
    for &seed in &config.seeds {
        for arm in &config.arms {
            let (models, skipped) = arm_models(arm, &suite, &config.directions, config.policy.mono_ratio);
            for (d, reason) in skipped {
                for &kind in kinds {
                    cells.push(Cell {
                        arm: arm.name(),
                        direction: d.name(),
                        seed,
                        checkpoint: kind,
                        result: None,
                        failure: Some(reason.clone()),
                        hypotheses: None,
                    });
                }
            }
            for m in models {
                let dir = out.join(arm.name()).join(format!("seed-{seed}")).join(&m.name);
                let job = TrainJob {
                    policy: SamplingPolicy {
                        mono_ratio: m.mono_ratio,
                        seed,
                        ..config.policy
                    },
                    mask: config.mask,
                    model,
                    train: TrainConfig {
                        seed,
                        ..config.train.clone()
                    },
                };
                log::info!("training {} seed {seed} ({})", arm.name(), m.name);
                let trained = dev_batches(&suite, &m.directions, &job.policy).and_then(|dev| {
                    let options = TrainOptions {
                        resume: None,
                        dev: if config.evaluate_best { dev } else { Vec::new() },
                    };
                    train(&m.registry, &suite.vocab, &job, &dir, &options)
                });
                for d in &m.directions {
                    for &kind in kinds {
                        let mut cell = Cell {
                            arm: arm.name(),
                            direction: d.name(),
                            seed,
                            checkpoint: kind,
                            result: None,
                            failure: None,
                            hypotheses: None,
                        };
                        let ckpt = match (&trained, kind) {
                            (Err(e), _) => Err(format!("training failed: {e}")),
                            (Ok(o), CheckpointKind::Final) => Ok(o.final_checkpoint.clone()),
                            (Ok(o), CheckpointKind::Best) => o
                                .best_checkpoint
                                .clone()
                                .ok_or_else(|| "no dev set to select a best checkpoint".to_string()),
                        };
                        match ckpt {
                            Err(reason) => cell.failure = Some(reason),
                            Ok(ckpt) => {
                                let hyp = dir.join(format!("hyp.{}.{}.txt", d.name(), kind.as_str()));
                                match score(&ckpt, &suite, d, &config.decode, &hyp) {
                                    Ok(r) => {
                                        log::info!(
                                            "{} seed {seed} {} {}: BLEU {:.2}",
                                            arm.name(),
                                            d.name(),
                                            kind.as_str(),
                                            r.bleu
                                        );
                                        cell.result = Some(r);
                                        cell.hypotheses = Some(hyp);
                                    }
                                    Err(e) => cell.failure = Some(format!("evaluation failed: {e}")),
                                }
                            }
                        }
                        cells.push(cell);
                    }
                }
            }
        }
    }
    sort_cells(&mut cells);
    let report = ExperimentReport {
        name: config.name.clone(),
        config_hash: config.hash(),
        build: build_id(),
        seeds: config.seeds.clone(),
        summary: summarize(&cells, config.seeds.len()),
        cells,
    };
    write_report(&report, out)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Txt,
    Csv,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Json, ReportFormat::Txt, ReportFormat::Csv];

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Txt => "txt",
            ReportFormat::Csv => "csv",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "txt" => Ok(Self::Txt),
            "csv" => Ok(Self::Csv),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

fn fmt_bleu(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |b| format!("{b:.4}"))
}

/// Render a report. Rows are ordered by (arm, direction, seed).
pub fn emit_report(report: &ExperimentReport, format: ReportFormat) -> Result<String> {
    let mut cells = report.cells.clone();
    sort_cells(&mut cells);
    Ok(match format {
        ReportFormat::Json => {
            let mut r = report.clone();
            r.cells = cells;
            serde_json::to_string_pretty(&r)? + "\n"
        }
        ReportFormat::Csv => {
            let mut s = String::from("arm,direction,seed,checkpoint,bleu,bp,hyp_len,ref_len,failure\n");
            for c in &cells {
                let r = c.result.as_ref();
                let failure = c.failure.as_deref().unwrap_or("").replace(['"', '\n'], " ");
                writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},\"{}\"",
                    c.arm,
                    c.direction,
                    c.seed,
                    c.checkpoint.as_str(),
                    fmt_bleu(r.map(|r| r.bleu)),
                    r.map_or_else(|| "-".into(), |r| format!("{:.4}", r.brevity_penalty)),
                    r.map_or_else(|| "-".into(), |r| r.hyp_len.to_string()),
                    r.map_or_else(|| "-".into(), |r| r.ref_len.to_string()),
                    failure
                )
                .expect("writing to a String");
            }
            s
        }
        ReportFormat::Txt => {
            let mut s = String::new();
            writeln!(s, "experiment {} ({})", report.name, report.build).expect("string");
            writeln!(s, "config {}", report.config_hash).expect("string");
            let seeds: Vec<String> = report.seeds.iter().map(u64::to_string).collect();
            writeln!(s, "seeds {}", seeds.join(",")).expect("string");
            writeln!(s).expect("string");
            writeln!(s, "{:<28} {:<14} {:<6} {:>10}  per-seed", "arm", "direction", "ckpt", "median").expect("string");
            for row in &report.summary {
                let per_seed: Vec<String> = cells
                    .iter()
                    .filter(|c| c.arm == row.arm && c.direction == row.direction && c.checkpoint == row.checkpoint)
                    .map(|c| match &c.result {
                        Some(r) => format!("{}={}", c.seed, fmt_bleu(Some(r.bleu))),
                        None => format!("{}=failed", c.seed),
                    })
                    .collect();
                writeln!(
                    s,
                    "{:<28} {:<14} {:<6} {:>10}  {}",
                    row.arm,
                    row.direction,
                    row.checkpoint.as_str(),
                    fmt_bleu(row.median_bleu),
                    per_seed.join(" ")
                )
                .expect("string");
            }
            let failures: Vec<&Cell> = cells.iter().filter(|c| c.failure.is_some()).collect();
            if !failures.is_empty() {
                writeln!(s, "\nfailed cells").expect("string");
                for c in failures {
                    writeln!(
                        s,
                        "  {} {} seed {} {}: {}",
                        c.arm,
                        c.direction,
                        c.seed,
                        c.checkpoint.as_str(),
                        c.failure.as_deref().unwrap_or("")
                    )
                    .expect("string");
                }
            }
            s
        }
    })
}

/// Write `report.{json,txt,csv}` into `dir`.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for f in ReportFormat::ALL {
        let path = dir.join(format!("report.{}", f.extension()));
        fs::write(&path, emit_report(report, f)?).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
