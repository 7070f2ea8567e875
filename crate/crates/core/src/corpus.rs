//! Parallel and monolingual text stores and the registry that sizes them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::subword::normalize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelStore {
    pub src_lang: String,
    pub tgt_lang: String,
    pub pairs: Vec<(String, String)>,
}

impl ParallelStore {
    pub fn new(src_lang: &str, tgt_lang: &str, pairs: Vec<(String, String)>) -> Result<Self> {
        if src_lang == tgt_lang {
            return Err(Error::Config(format!(
                "parallel store needs two languages, got {src_lang}-{tgt_lang}"
            )));
        }
        Ok(Self {
            src_lang: src_lang.to_string(),
            tgt_lang: tgt_lang.to_string(),
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn touches(&self, lang: &str) -> bool {
        self.src_lang == lang || self.tgt_lang == lang
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonoStore {
    pub lang: String,
    pub sentences: Vec<String>,
}

impl MonoStore {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// Outcome counts of a load with filtering.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub read: usize,
    pub kept: usize,
    pub dropped_empty: usize,
    pub dropped_long: usize,
    pub truncated: usize,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(normalize).collect())
}

/// Load a line-aligned parallel corpus, dropping pairs where either side
/// is empty or longer than `max_len` whitespace tokens.
pub fn load_parallel(
    src_path: impl AsRef<Path>,
    tgt_path: impl AsRef<Path>,
    src_lang: &str,
    tgt_lang: &str,
    max_len: usize,
) -> Result<(ParallelStore, LoadReport)> {
    let (src_path, tgt_path) = (src_path.as_ref(), tgt_path.as_ref());
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::Misaligned {
            src_path: src_path.display().to_string(),
            src_lines: src.len(),
            tgt_path: tgt_path.display().to_string(),
            tgt_lines: tgt.len(),
        });
    }
    let mut report = LoadReport {
        read: src.len(),
        ..Default::default()
    };
    let mut pairs = Vec::with_capacity(src.len());
    for (s, t) in src.into_iter().zip(tgt) {
        if s.is_empty() || t.is_empty() {
            report.dropped_empty += 1;
        } else if word_count(&s) > max_len || word_count(&t) > max_len {
            report.dropped_long += 1;
        } else {
            pairs.push((s, t));
        }
    }
    report.kept = pairs.len();
    if report.dropped_long > 0 {
        log::info!(
            "{}: dropped {} over-length pairs (max_len {max_len})",
            src_path.display(),
            report.dropped_long
        );
    }
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "{} / {} has no usable pairs",
            src_path.display(),
            tgt_path.display()
        )));
    }
    Ok((ParallelStore::new(src_lang, tgt_lang, pairs)?, report))
}

/// Load a monolingual corpus. Empty lines are skipped; sentences longer
/// than `max_len` whitespace tokens are truncated. Duplicates are kept.
pub fn load_mono(path: impl AsRef<Path>, lang: &str, max_len: usize) -> Result<(MonoStore, LoadReport)> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    let mut report = LoadReport {
        read: lines.len(),
        ..Default::default()
    };
    let mut sentences = Vec::with_capacity(lines.len());
    for line in lines {
        if line.is_empty() {
            report.dropped_empty += 1;
            continue;
        }
        if word_count(&line) > max_len {
            report.truncated += 1;
            sentences.push(line.split(' ').take(max_len).collect::<Vec<_>>().join(" "));
        } else {
            sentences.push(line);
        }
    }
    report.kept = sentences.len();
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus(format!("{} has no sentences", path.display())));
    }
    Ok((
        MonoStore {
            lang: lang.to_string(),
            sentences,
        },
        report,
    ))
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Identifies one store in a registry.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StoreKey {
    Parallel(String, String),
    Mono(String),
}

impl fmt::Display for StoreKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StoreKey::Parallel(s, t) => write!(f, "{s}-{t}"),
            StoreKey::Mono(l) => write!(f, "{l}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatRow {
    pub store: String,
    pub kind: String,
    pub count: usize,
}

/// All corpora available to one training run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRegistry {
    parallel: BTreeMap<(String, String), ParallelStore>,
    mono: BTreeMap<String, MonoStore>,
}

impl CorpusRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a parallel store, replacing any store for the same pair.
    pub fn add_parallel(&mut self, store: ParallelStore) -> Option<ParallelStore> {
        self.parallel
            .insert((store.src_lang.clone(), store.tgt_lang.clone()), store)
    }

    pub fn add_mono(&mut self, store: MonoStore) -> Option<MonoStore> {
        self.mono.insert(store.lang.clone(), store)
    }

    pub fn remove_parallel(&mut self, src: &str, tgt: &str) -> Option<ParallelStore> {
        self.parallel.remove(&(src.to_string(), tgt.to_string()))
    }

    pub fn remove_mono(&mut self, lang: &str) -> Option<MonoStore> {
        self.mono.remove(lang)
    }

    pub fn parallel(&self) -> impl Iterator<Item = &ParallelStore> {
        self.parallel.values()
    }

    pub fn mono(&self) -> impl Iterator<Item = &MonoStore> {
        self.mono.values()
    }

    pub fn parallel_store(&self, src: &str, tgt: &str) -> Option<&ParallelStore> {
        self.parallel.get(&(src.to_string(), tgt.to_string()))
    }

    pub fn mono_store(&self, lang: &str) -> Option<&MonoStore> {
        self.mono.get(lang)
    }

    pub fn is_empty(&self) -> bool {
        self.parallel.is_empty() && self.mono.is_empty()
    }

    /// Every language mentioned by any store, sorted.
    pub fn languages(&self) -> Vec<String> {
        let mut langs: Vec<String> = self
            .parallel
            .keys()
            .flat_map(|(s, t)| [s.clone(), t.clone()])
            .chain(self.mono.keys().cloned())
            .collect();
        langs.sort();
        langs.dedup();
        langs
    }

    /// Store sizes, recomputed from the stores on every call.
    pub fn sizes(&self) -> BTreeMap<StoreKey, usize> {
        self.parallel
            .iter()
            .map(|((s, t), p)| (StoreKey::Parallel(s.clone(), t.clone()), p.len()))
            .chain(
                self.mono
                    .iter()
                    .map(|(l, m)| (StoreKey::Mono(l.clone()), m.len())),
            )
            .collect()
    }

    pub fn stats(&self) -> Vec<StatRow> {
        registry_stats(self)
    }

    /// All sentences in all stores, for vocabulary training.
    pub fn all_text(&self) -> impl Iterator<Item = &str> {
        self.parallel
            .values()
            .flat_map(|p| p.pairs.iter().flat_map(|(s, t)| [s.as_str(), t.as_str()]))
            .chain(
                self.mono
                    .values()
                    .flat_map(|m| m.sentences.iter().map(String::as_str)),
            )
    }
}

/// One row per store: parallel stores first, then monolingual, each sorted.
pub fn registry_stats(r: &CorpusRegistry) -> Vec<StatRow> {
    r.sizes()
        .into_iter()
        .map(|(key, count)| StatRow {
            kind: match key {
                StoreKey::Parallel(..) => "parallel".into(),
                StoreKey::Mono(_) => "mono".into(),
            },
            store: key.to_string(),
            count,
        })
        .collect()
}

/// Write a store as plain text: `<dir>/<name>` one sentence per line.
pub fn write_lines<'a>(path: impl AsRef<Path>, lines: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for line in lines {
        text.push_str(line);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
