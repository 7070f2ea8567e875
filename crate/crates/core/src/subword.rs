//! Shared byte-pair subword vocabulary.
//!
//! A single inventory serves every language. Ids are laid out as
//! `pad=0, bos=1, eos=2, unk=3, mask=4`, followed by one `<2xx>` tag per
//! language in sorted code order, followed by the learned pieces.
//!
//! Words are split on whitespace. The last symbol of every word carries
//! the boundary marker [`BOUNDARY`], so `"ab ac"` starts out as
//! `a b</w> a c</w>`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Marker appended to word-final symbols.
pub const BOUNDARY: &str = "</w>";

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const MASK: u32 = 4;

/// Number of reserved ids preceding the language tags.
pub const NUM_RESERVED: usize = 5;

const RESERVED_PIECES: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>", "<mask>"];

const FILE_MAGIC: &str = "mlmass-vocab";
const FILE_VERSION: &str = "v1";

/// Surface form of the target-language tag for `lang`.
pub fn lang_tag(lang: &str) -> String {
    format!("<2{lang}>")
}

/// Collapse whitespace runs to single spaces and trim the ends.
pub fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    langs: Vec<String>,
    merges: Vec<(String, String)>,
    index: HashMap<String, u32>,
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

impl Vocabulary {
    fn from_parts(
        pieces: Vec<String>,
        langs: Vec<String>,
        merges: Vec<(String, String)>,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(pieces.len());
        for (id, piece) in pieces.iter().enumerate() {
            if index.insert(piece.clone(), id as u32).is_some() {
                return Err(Error::Config(format!("duplicate piece {piece:?}")));
            }
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (left, right)) in merges.iter().enumerate() {
            let lookup = |p: &str| {
                index
                    .get(p)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("merge references unknown piece {p:?}")))
            };
            let (l, r) = (lookup(left)?, lookup(right)?);
            let merged = lookup(&format!("{left}{right}"))?;
            ranks.entry((l, r)).or_insert((rank, merged));
        }
        Ok(Self {
            pieces,
            langs,
            merges,
            index,
            ranks,
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Language codes with a reserved tag, in id order.
    pub fn langs(&self) -> &[String] {
        &self.langs
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    /// Id of the `<2lang>` tag, if the language was reserved at training time.
    pub fn tag_id(&self, lang: &str) -> Option<u32> {
        self.langs
            .binary_search_by(|l| l.as_str().cmp(lang))
            .ok()
            .map(|i| (NUM_RESERVED + i) as u32)
    }

    /// First id after the reserved tokens and language tags.
    pub fn first_regular_id(&self) -> u32 {
        (NUM_RESERVED + self.langs.len()) as u32
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < self.first_regular_id()
    }

    /// Encode a sentence into subword ids. No bos/eos framing is added.
    pub fn encode(&self, s: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in s.split_whitespace() {
            self.encode_word_into(word, &mut out);
        }
        out
    }

    fn encode_word_into(&self, word: &str, out: &mut Vec<u32>) {
        let chars: Vec<char> = word.chars().collect();
        let mut symbols: Vec<u32> = chars
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let sym = if i + 1 == chars.len() {
                    format!("{c}{BOUNDARY}")
                } else {
                    c.to_string()
                };
                self.id(&sym).unwrap_or(UNK)
            })
            .collect();
        // Repeatedly apply the lowest-ranked applicable merge.
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0], w[1])).map(|&(r, m)| (r, i, m)))
                .min();
            match best {
                Some((_, i, merged)) => {
                    symbols[i] = merged;
                    symbols.remove(i + 1);
                }
                None => break,
            }
        }
        out.extend(symbols);
    }

    /// Decode ids back to text. Reserved tokens and language tags are dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut text = String::new();
        for &id in ids {
            let piece = self.piece(id).ok_or(Error::TokenOutOfRange {
                id,
                size: self.len(),
            })?;
            if self.is_special(id) {
                continue;
            }
            match piece.strip_suffix(BOUNDARY) {
                Some(stem) => {
                    text.push_str(stem);
                    text.push(' ');
                }
                None => text.push_str(piece),
            }
        }
        Ok(text.trim_end().to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }

    /// Serialize to the line-oriented vocabulary format.
    ///
    /// ```text
    /// mlmass-vocab v1 pieces=<n> tags=<k> merges=<m> boundary=</w>
    /// <piece>            n lines, id order
    /// <left>\t<right>    m lines, merge order
    /// ```
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{FILE_MAGIC} {FILE_VERSION} pieces={} tags={} merges={} boundary={BOUNDARY}",
            self.pieces.len(),
            self.langs.len(),
            self.merges.len()
        );
        for piece in &self.pieces {
            out.push_str(piece);
            out.push('\n');
        }
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l}\t{r}");
        }
        out
    }

    pub fn from_text(text: &str, file: &str) -> Result<Self> {
        let malformed = |line: usize, reason: String| Error::Malformed {
            file: file.to_string(),
            line,
            reason,
        };
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| malformed(1, "missing header section".into()))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.first() != Some(&FILE_MAGIC) {
            return Err(malformed(1, format!("bad magic in header {header:?}")));
        }
        let version = fields.get(1).copied().unwrap_or("");
        if version != FILE_VERSION {
            return Err(Error::VersionMismatch {
                found: version.to_string(),
                expected: FILE_VERSION.to_string(),
            });
        }
        let mut counts = BTreeMap::new();
        for field in &fields[2..] {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| malformed(1, format!("bad header field {field:?}")))?;
            counts.insert(k, v);
        }
        let count = |key: &str| -> Result<usize> {
            counts
                .get(key)
                .ok_or_else(|| malformed(1, format!("header lacks {key}=")))?
                .parse()
                .map_err(|_| malformed(1, format!("header field {key} is not a count")))
        };
        let (n_pieces, n_tags, n_merges) = (count("pieces")?, count("tags")?, count("merges")?);
        if counts.get("boundary") != Some(&BOUNDARY) {
            return Err(malformed(1, "unsupported boundary marker".into()));
        }
        if n_pieces < NUM_RESERVED + n_tags {
            return Err(malformed(1, "piece count smaller than reserved + tags".into()));
        }

        let mut pieces = Vec::with_capacity(n_pieces);
        for i in 0..n_pieces {
            let line_no = 2 + i;
            let line = lines.next().ok_or_else(|| {
                malformed(
                    line_no,
                    format!("truncated pieces section: expected {n_pieces} pieces, found {i}"),
                )
            })?;
            if line.is_empty() || line.contains(char::is_whitespace) {
                return Err(malformed(line_no, format!("invalid piece {line:?}")));
            }
            pieces.push(line.to_string());
        }
        for (i, want) in RESERVED_PIECES.iter().enumerate() {
            if pieces[i] != *want {
                return Err(malformed(2 + i, format!("expected reserved piece {want}")));
            }
        }
        let mut langs = Vec::with_capacity(n_tags);
        for i in 0..n_tags {
            let piece = &pieces[NUM_RESERVED + i];
            let code = piece
                .strip_prefix("<2")
                .and_then(|p| p.strip_suffix('>'))
                .ok_or_else(|| malformed(2 + NUM_RESERVED + i, format!("bad tag {piece:?}")))?;
            langs.push(code.to_string());
        }

        let mut merges = Vec::with_capacity(n_merges);
        for i in 0..n_merges {
            let line_no = 2 + n_pieces + i;
            let line = lines.next().ok_or_else(|| {
                malformed(
                    line_no,
                    format!("truncated merges section: expected {n_merges} merges, found {i}"),
                )
            })?;
            let (l, r) = line
                .split_once('\t')
                .ok_or_else(|| malformed(line_no, format!("bad merge line {line:?}")))?;
            merges.push((l.to_string(), r.to_string()));
        }
        if let Some(extra) = lines.next() {
            return Err(malformed(
                2 + n_pieces + n_merges,
                format!("unexpected trailing line {extra:?}"),
            ));
        }
        Self::from_parts(pieces, langs, merges)
            .map_err(|e| malformed(1, format!("inconsistent vocabulary: {e}")))
    }
}

/// Smallest `target_size` accepted by [`train_vocab`] for these inputs.
pub fn minimum_size<'a>(texts: impl IntoIterator<Item = &'a str>, n_langs: usize) -> usize {
    let words = count_words(texts);
    NUM_RESERVED + n_langs + base_symbols(&words).len()
}

/// Train a byte-pair vocabulary over whitespace-split words.
///
/// Merging stops at `target_size` pieces or when no pair occurs at least
/// twice. Equal pair counts resolve to the lexicographically smallest pair.
pub fn train_vocab<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    target_size: usize,
    reserved_langs: &[String],
) -> Result<Vocabulary> {
    let words = count_words(texts);
    if words.is_empty() {
        return Err(Error::EmptyCorpus("no words to train a vocabulary on".into()));
    }
    let langs: Vec<String> = reserved_langs
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    for lang in &langs {
        if lang.is_empty() || lang.contains(|c: char| c.is_whitespace() || c == '>') {
            return Err(Error::Config(format!("invalid language code {lang:?}")));
        }
    }

    let base = base_symbols(&words);
    let minimum = NUM_RESERVED + langs.len() + base.len();
    if target_size < minimum {
        return Err(Error::VocabTooSmall {
            requested: target_size,
            minimum,
        });
    }

    let mut pieces: Vec<String> = RESERVED_PIECES.iter().map(|s| s.to_string()).collect();
    pieces.extend(langs.iter().map(|l| lang_tag(l)));
    pieces.extend(base.iter().cloned());
    let mut known: HashMap<String, ()> = pieces.iter().map(|p| (p.clone(), ())).collect();

    // Each distinct word as a symbol sequence with its corpus count.
    let mut segmented: Vec<(Vec<String>, u64)> = words
        .into_iter()
        .map(|(w, n)| (initial_symbols(&w), n))
        .collect();

    let mut merges = Vec::new();
    while pieces.len() < target_size {
        let mut pair_counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (symbols, n) in &segmented {
            for w in symbols.windows(2) {
                *pair_counts.entry((&w[0], &w[1])).or_default() += n;
            }
        }
        let best = pair_counts
            .into_iter()
            .filter(|&(_, n)| n >= 2)
            .max_by(|(pa, na), (pb, nb)| na.cmp(nb).then_with(|| pb.cmp(pa)));
        let Some(((left, right), _)) = best else { break };
        let (left, right) = (left.to_string(), right.to_string());
        let merged = format!("{left}{right}");

        for (symbols, _) in &mut segmented {
            let mut i = 0;
            while i + 1 < symbols.len() {
                if symbols[i] == left && symbols[i + 1] == right {
                    symbols[i] = merged.clone();
                    symbols.remove(i + 1);
                }
                i += 1;
            }
        }
        if known.insert(merged.clone(), ()).is_none() {
            pieces.push(merged);
        }
        merges.push((left, right));
    }
    Vocabulary::from_parts(pieces, langs, merges)
}

fn count_words<'a>(texts: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, u64> {
    let mut words = BTreeMap::new();
    for text in texts {
        for w in text.split_whitespace() {
            *words.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    words
}

fn initial_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == chars.len() {
                format!("{c}{BOUNDARY}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

/// Distinct initial symbols in sorted order.
fn base_symbols(words: &BTreeMap<String, u64>) -> Vec<String> {
    words
        .keys()
        .flat_map(|w| initial_symbols(w))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}
