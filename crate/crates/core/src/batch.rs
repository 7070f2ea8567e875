//! Framed training examples and padded batches.

use serde::{Deserialize, Serialize};

use crate::subword::{BOS, EOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Translation,
    Mass,
}

/// One framed sequence pair, before padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub enc_ids: Vec<u32>,
    pub enc_pos: Vec<u32>,
    pub dec_in: Vec<u32>,
    pub dec_pos: Vec<u32>,
    pub target: Vec<u32>,
    pub loss_mask: Vec<u8>,
}

impl TrainingExample {
    /// Frame a translation pair: `[<2tgt>] src [eos]` into the encoder,
    /// `[bos] tgt` into the decoder, `tgt [eos]` as the target.
    pub fn translation(tag: u32, src: &[u32], tgt: &[u32]) -> Self {
        let mut enc_ids = Vec::with_capacity(src.len() + 2);
        enc_ids.push(tag);
        enc_ids.extend_from_slice(src);
        enc_ids.push(EOS);
        let mut dec_in = Vec::with_capacity(tgt.len() + 1);
        dec_in.push(BOS);
        dec_in.extend_from_slice(tgt);
        let mut target = tgt.to_vec();
        target.push(EOS);
        Self {
            enc_pos: (0..enc_ids.len() as u32).collect(),
            enc_ids,
            dec_pos: (0..dec_in.len() as u32).collect(),
            dec_in,
            loss_mask: vec![1; target.len()],
            target,
        }
    }
}

/// A homogeneous padded batch: one objective and one direction or language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub objective: Objective,
    /// `src-tgt` for translation batches, the language code for MASS.
    pub unit: String,
    pub enc_ids: Vec<Vec<u32>>,
    pub enc_pos: Vec<Vec<u32>>,
    pub dec_in_ids: Vec<Vec<u32>>,
    pub dec_pos: Vec<Vec<u32>>,
    pub target_ids: Vec<Vec<u32>>,
    pub loss_mask: Vec<Vec<u8>>,
}

fn pad_rows<T: Copy>(rows: impl Iterator<Item = Vec<T>>, fill: T) -> Vec<Vec<T>> {
    let rows: Vec<Vec<T>> = rows.collect();
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    rows.into_iter()
        .map(|mut r| {
            r.resize(width, fill);
            r
        })
        .collect()
}

impl Batch {
    pub fn from_examples(objective: Objective, unit: impl Into<String>, examples: Vec<TrainingExample>) -> Self {
        let col = |f: fn(&TrainingExample) -> &Vec<u32>| {
            pad_rows(examples.iter().map(|e| f(e).clone()), PAD)
        };
        let pos = |f: fn(&TrainingExample) -> &Vec<u32>| pad_rows(examples.iter().map(|e| f(e).clone()), 0);
        Self {
            objective,
            unit: unit.into(),
            enc_ids: col(|e| &e.enc_ids),
            enc_pos: pos(|e| &e.enc_pos),
            dec_in_ids: col(|e| &e.dec_in),
            dec_pos: pos(|e| &e.dec_pos),
            target_ids: col(|e| &e.target),
            loss_mask: pad_rows(examples.iter().map(|e| e.loss_mask.clone()), 0),
        }
    }

    pub fn rows(&self) -> usize {
        self.enc_ids.len()
    }

    pub fn enc_len(&self) -> usize {
        self.enc_ids.first().map_or(0, Vec::len)
    }

    pub fn dec_len(&self) -> usize {
        self.dec_in_ids.first().map_or(0, Vec::len)
    }

    /// Number of positions contributing to the loss.
    pub fn loss_tokens(&self) -> usize {
        self.loss_mask.iter().flatten().filter(|&&m| m != 0).count()
    }

    /// Short description used in logs and error messages.
    pub fn header(&self) -> String {
        let obj = match self.objective {
            Objective::Translation => "translation",
            Objective::Mass => "mass",
        };
        format!(
            "{obj} {} rows={} enc_len={} dec_len={}",
            self.unit,
            self.rows(),
            self.enc_len(),
            self.dec_len()
        )
    }

    /// Select a subset of rows in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let pick = |m: &Vec<Vec<u32>>| rows.iter().map(|&r| m[r].clone()).collect();
        Self {
            objective: self.objective,
            unit: self.unit.clone(),
            enc_ids: pick(&self.enc_ids),
            enc_pos: pick(&self.enc_pos),
            dec_in_ids: pick(&self.dec_in_ids),
            dec_pos: pick(&self.dec_pos),
            target_ids: pick(&self.target_ids),
            loss_mask: rows.iter().map(|&r| self.loss_mask[r].clone()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn translation_framing_and_padding() {
        let a = TrainingExample::translation(9, &[20, 21], &[30]);
        assert_eq!(a.enc_ids, vec![9, 20, 21, EOS]);
        assert_eq!(a.dec_in, vec![BOS, 30]);
        assert_eq!(a.target, vec![30, EOS]);
        let b = TrainingExample::translation(9, &[20], &[30, 31, 32]);
        let batch = Batch::from_examples(Objective::Translation, "xx-yy", vec![a, b]);
        assert_eq!(batch.enc_ids[1], vec![9, 20, EOS, PAD]);
        assert_eq!(batch.target_ids[0], vec![30, EOS, PAD, PAD]);
        assert_eq!(batch.loss_mask[0], vec![1, 1, 0, 0]);
        assert_eq!(batch.loss_tokens(), 6);
    }
}
