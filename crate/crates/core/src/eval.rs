//! Corpus BLEU and translation of whole test sets.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::ParallelStore;
use crate::error::{Error, Result};
use crate::model::{beam_decode, greedy_decode_batch, ModelParams, OutputFilter};
use crate::subword::Vocabulary;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "method", content = "k")]
pub enum Smoothing {
    #[default]
    None,
    /// Adds `k` to matches and totals for orders 2 and up.
    AddK(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuResult {
    /// In `[0, 100]`.
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub smoothing: Smoothing,
    /// Set when every hypothesis is empty.
    pub empty_hypotheses: bool,
}

fn ngram_counts<'t, 's>(tokens: &'t [&'s str], n: usize) -> HashMap<&'t [&'s str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_lengths<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::Config(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::EmptyCorpus("no segments to score".into()));
    }
    Ok(())
}

/// Clipped n-gram matches and hypothesis n-gram totals for orders
/// `1..=n_max`, summed over the corpus. Tokens are whitespace-separated.
pub fn ngram_precisions<H: AsRef<str>, R: AsRef<str>>(
    hyps: &[H],
    refs: &[R],
    n_max: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    check_lengths(hyps, refs)?;
    let mut matches = vec![0; n_max];
    let mut totals = vec![0; n_max];
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        for n in 1..=n_max {
            let rc = ngram_counts(&r, n);
            for (gram, count) in ngram_counts(&h, n) {
                matches[n - 1] += count.min(rc.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    Ok((matches, totals))
}

fn token_len(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Corpus-level BLEU with a single reference per segment.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R], smoothing: Smoothing) -> Result<BleuResult> {
    let (m, t) = ngram_precisions(hyps, refs, MAX_ORDER)?;
    let hyp_len: usize = hyps.iter().map(|h| token_len(h.as_ref())).sum();
    let ref_len: usize = refs.iter().map(|r| token_len(r.as_ref())).sum();
    let mut matches = [0; MAX_ORDER];
    let mut totals = [0; MAX_ORDER];
    matches.copy_from_slice(&m);
    totals.copy_from_slice(&t);

    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        let (mut num, mut den) = (matches[n] as f64, totals[n] as f64);
        if let Smoothing::AddK(k) = smoothing {
            if n >= 1 {
                num += k;
                den += k;
            }
        }
        precisions[n] = if den > 0.0 { num / den } else { 0.0 };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let empty_hypotheses = hyp_len == 0;
    if empty_hypotheses {
        log::warn!("all hypotheses are empty; BLEU is 0");
    }
    let bleu = if empty_hypotheses || precisions.iter().any(|&p| p <= 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        (100.0 * brevity_penalty * log_mean.exp()).min(100.0)
    };
    Ok(BleuResult {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
        smoothing,
        empty_hypotheses,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeSettings {
    /// 1 selects batched greedy decoding.
    pub beam: usize,
    pub alpha: f64,
    /// Output cap is `extra_steps + 2 · source pieces`.
    pub extra_steps: usize,
    pub batch_size: usize,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            beam: 1,
            alpha: 0.6,
            extra_steps: 10,
            batch_size: 64,
        }
    }
}

/// Translate `srcs` into `tgt_lang`. Any tag in the vocabulary is
/// accepted, including directions the model never trained on.
pub fn translate<S: AsRef<str>>(
    params: &ModelParams<f32>,
    vocab: &Vocabulary,
    srcs: &[S],
    tgt_lang: &str,
    settings: &DecodeSettings,
) -> Result<Vec<String>> {
    let tag = vocab
        .tag_id(tgt_lang)
        .ok_or_else(|| Error::Config(format!("language {tgt_lang} has no tag in the vocabulary")))?;
    let filter = OutputFilter {
        first_regular: vocab.first_regular_id(),
    };
    // Room for the tag and eos.
    let budget = params.config.max_positions.saturating_sub(2);
    let encoded: Vec<Vec<u32>> = srcs
        .iter()
        .map(|s| {
            let mut ids = vocab.encode(s.as_ref());
            ids.truncate(budget);
            ids
        })
        .collect();
    let mut out = Vec::with_capacity(srcs.len());
    if settings.beam <= 1 {
        for chunk in encoded.chunks(settings.batch_size.max(1)) {
            let longest = chunk.iter().map(Vec::len).max().unwrap_or(0);
            let steps = settings.extra_steps + 2 * longest;
            for ids in greedy_decode_batch(params, chunk, tag, steps, filter)? {
                out.push(vocab.decode(&ids)?);
            }
        }
    } else {
        for ids in &encoded {
            let steps = settings.extra_steps + 2 * ids.len();
            let best = beam_decode(params, ids, tag, settings.beam, steps, settings.alpha, filter)?.best;
            out.push(vocab.decode(&best)?);
        }
    }
    Ok(out)
}

/// Translate the source side of `test` and score it against the target
/// side. Returns the hypotheses alongside the score.
pub fn score_direction(
    params: &ModelParams<f32>,
    vocab: &Vocabulary,
    test: &ParallelStore,
    settings: &DecodeSettings,
) -> Result<(BleuResult, Vec<String>)> {
    if test.pairs.is_empty() {
        return Err(Error::EmptyCorpus(format!("test set {}-{}", test.src_lang, test.tgt_lang)));
    }
    let srcs: Vec<&str> = test.pairs.iter().map(|(s, _)| s.as_str()).collect();
    let refs: Vec<&str> = test.pairs.iter().map(|(_, t)| t.as_str()).collect();
    let hyps = translate(params, vocab, &srcs, &test.tgt_lang, settings)?;
    Ok((corpus_bleu(&hyps, &refs, Smoothing::None)?, hyps))
}

/// Two-stage translation `src → pivot → tgt` through the same model.
pub fn pivot_translate<S: AsRef<str>>(
    params: &ModelParams<f32>,
    vocab: &Vocabulary,
    srcs: &[S],
    pivot_lang: &str,
    tgt_lang: &str,
    settings: &DecodeSettings,
) -> Result<Vec<String>> {
    if pivot_lang == tgt_lang {
        return Err(Error::Config(format!(
            "pivot language {pivot_lang} equals the target language"
        )));
    }
    let mid = translate(params, vocab, srcs, pivot_lang, settings)?;
    translate(params, vocab, &mid, tgt_lang, settings)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping() {
        let (m, t) = ngram_precisions(&["a a a"], &["a"], 1).unwrap();
        assert_eq!((m[0], t[0]), (1, 3));
    }

    #[test]
    fn worked_example() {
        let hyp = ["the cat sat on the mat"];
        let r = ["the cat sat on a mat"];
        let (m, t) = ngram_precisions(&hyp, &r, 4).unwrap();
        assert_eq!(m, vec![5, 3, 2, 1]);
        assert_eq!(t, vec![6, 5, 4, 3]);
        let b = corpus_bleu(&hyp, &r, Smoothing::None).unwrap();
        assert!((b.bleu - 100.0 * (1.0f64 / 12.0).powf(0.25)).abs() < 1e-9);
        assert!((b.bleu - 53.73).abs() < 0.01);
        assert_eq!(b.brevity_penalty, 1.0);
        assert_eq!((b.hyp_len, b.ref_len), (6, 6));
    }

    #[test]
    fn identical_is_exactly_100() {
        let c = ["a b c d e", "f g h i"];
        assert_eq!(corpus_bleu(&c, &c, Smoothing::None).unwrap().bleu, 100.0);
    }

    #[test]
    fn brevity_penalty_value() {
        let b = corpus_bleu(&["a b c"], &["a b c d"], Smoothing::AddK(1.0)).unwrap();
        assert!((b.brevity_penalty - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-12);
        assert!((b.brevity_penalty - 0.7165).abs() < 1e-4);
    }

    #[test]
    fn empty_hypotheses_flagged() {
        let b = corpus_bleu(&["", ""], &["a", "b"], Smoothing::None).unwrap();
        assert_eq!(b.bleu, 0.0);
        assert!(b.empty_hypotheses);
    }

    #[test]
    fn errors() {
        let none: [&str; 0] = [];
        assert!(matches!(corpus_bleu(&none, &none, Smoothing::None), Err(Error::EmptyCorpus(_))));
        assert!(corpus_bleu(&["a"], &["a", "b"], Smoothing::None).is_err());
    }

    #[test]
    fn missing_order_gives_zero_without_smoothing() {
        let b = corpus_bleu(&["a b c"], &["a b c"], Smoothing::None).unwrap();
        assert_eq!(b.bleu, 0.0);
        let s = corpus_bleu(&["a b c"], &["a b c"], Smoothing::AddK(1.0)).unwrap();
        assert!(s.bleu > 0.0);
    }
}
