//! Masked sequence-to-sequence examples from monolingual text.
//!
//! A contiguous fragment `u..u+k` of the sentence is corrupted on the
//! encoder side; the decoder is trained to emit exactly that fragment.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::TrainingExample;
use crate::error::{Error, Result};
use crate::subword::{BOS, EOS, MASK};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskSpec {
    pub fragment_ratio: f64,
    /// Probabilities of (mask token, random token, unchanged) per fragment position.
    pub replace_probs: (f64, f64, f64),
    pub min_len: usize,
    /// Decoder positions follow the fragment's original offsets when set,
    /// otherwise they start at zero.
    pub absolute_positions: bool,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            fragment_ratio: 0.5,
            replace_probs: (0.8, 0.1, 0.1),
            min_len: 2,
            absolute_positions: true,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fragment_ratio > 0.0 && self.fragment_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "fragment_ratio {} outside (0, 1]",
                self.fragment_ratio
            )));
        }
        let (a, b, c) = self.replace_probs;
        if [a, b, c].iter().any(|p| !(0.0..=1.0).contains(p)) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "replace_probs {:?} must be probabilities summing to 1",
                self.replace_probs
            )));
        }
        if self.min_len == 0 {
            return Err(Error::Config("min_len must be at least 1".into()));
        }
        Ok(())
    }

    /// Fragment length for a sentence of `m` tokens.
    pub fn fragment_len(&self, m: usize) -> usize {
        ((self.fragment_ratio * m as f64).round() as usize).clamp(1, m.max(1))
    }
}

/// What happened to one fragment position on the encoder side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    Masked,
    Random,
    Kept,
}

/// A MASS example together with the choices made while building it.
#[derive(Debug, Clone, PartialEq)]
pub struct MassExample {
    pub example: TrainingExample,
    pub start: usize,
    pub len: usize,
    pub corruption: Vec<Corruption>,
}

/// Draw the fragment `(start, len)` for a sentence of `m` tokens.
pub fn sample_span<R: Rng + ?Sized>(m: usize, spec: &MaskSpec, rng: &mut R) -> Result<(usize, usize)> {
    if m < spec.min_len || m == 0 {
        return Err(Error::Config(format!(
            "sentence of length {m} is shorter than min_len {}",
            spec.min_len
        )));
    }
    let k = spec.fragment_len(m);
    let u = rng.gen_range(0..=m - k);
    Ok((u, k))
}

/// Build one MASS example. `random_ids` is the id range random
/// replacements are drawn from (the non-special pieces).
pub fn build_mass_example<R: Rng + ?Sized>(
    tokens: &[u32],
    lang_tag: u32,
    spec: &MaskSpec,
    random_ids: Range<u32>,
    rng: &mut R,
) -> Result<MassExample> {
    let (u, k) = sample_span(tokens.len(), spec, rng)?;
    Ok(build_with_span(tokens, lang_tag, spec, random_ids, u, k, rng))
}

/// Build a MASS example for a given fragment.
pub fn build_with_span<R: Rng + ?Sized>(
    tokens: &[u32],
    lang_tag: u32,
    spec: &MaskSpec,
    random_ids: Range<u32>,
    u: usize,
    k: usize,
    rng: &mut R,
) -> MassExample {
    let m = tokens.len();
    assert!(k >= 1 && u + k <= m, "fragment {u}+{k} outside sentence of {m}");
    let (p_mask, p_random, _) = spec.replace_probs;

    let mut enc_ids = Vec::with_capacity(m + 2);
    enc_ids.push(lang_tag);
    enc_ids.extend_from_slice(tokens);
    enc_ids.push(EOS);

    let mut corruption = Vec::with_capacity(k);
    for i in u..u + k {
        let r: f64 = rng.gen();
        let kind = if r < p_mask {
            enc_ids[1 + i] = MASK;
            Corruption::Masked
        } else if r < p_mask + p_random {
            enc_ids[1 + i] = rng.gen_range(random_ids.clone());
            Corruption::Random
        } else {
            Corruption::Kept
        };
        corruption.push(kind);
    }

    let fragment = &tokens[u..u + k];
    let mut dec_in = Vec::with_capacity(k);
    dec_in.push(BOS);
    dec_in.extend_from_slice(&fragment[..k - 1]);
    let offset = if spec.absolute_positions { u } else { 0 };

    MassExample {
        example: TrainingExample {
            enc_pos: (0..enc_ids.len() as u32).collect(),
            enc_ids,
            dec_in,
            dec_pos: (offset as u32..(offset + k) as u32).collect(),
            target: fragment.to_vec(),
            loss_mask: vec![1; k],
        },
        start: u,
        len: k,
        corruption,
    }
}
