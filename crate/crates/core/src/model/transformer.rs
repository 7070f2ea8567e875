//! Pre-norm transformer encoder-decoder built on the tape.

use rand_chacha::ChaCha8Rng;

use super::graph::{AttentionMask, Graph, LossStats, Var};
use super::params::{AttentionIds, FeedForwardIds, ModelParams, ParamId};
use super::tensor::{Float, Matrix};
use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::subword::PAD;

/// Sinusoidal encodings for the given absolute positions.
pub fn position_encodings<T: Float>(positions: &[u32], d: usize) -> Matrix<T> {
    let mut m = Matrix::zeros(positions.len(), d);
    for (r, &pos) in positions.iter().enumerate() {
        let row = m.row_mut(r);
        for i in 0..d / 2 {
            let freq = (-(2.0 * i as f64) / d as f64 * 10_000f64.ln()).exp();
            let angle = pos as f64 * freq;
            row[2 * i] = T::from_f64(angle.sin());
            row[2 * i + 1] = T::from_f64(angle.cos());
        }
    }
    m
}

#[derive(Debug, Clone)]
pub struct ForwardResult<T> {
    /// `(rows · dec_len) × vocab_size`, row-major over (row, position).
    pub logits: Matrix<T>,
    /// Mean label-smoothed cross-entropy over loss positions.
    pub loss: T,
    /// Unsmoothed negative log-likelihood per loss position.
    pub nll: f64,
    pub token_count: usize,
}

/// Forward-pass options.
#[derive(Debug, Clone, Default)]
pub struct RunMode {
    /// Dropout masks are drawn from this rng when set.
    pub dropout: Option<ChaCha8Rng>,
}

impl RunMode {
    pub fn eval() -> Self {
        Self::default()
    }
}

fn check_positions(positions: &[Vec<u32>], max: usize) -> Result<()> {
    if let Some(&p) = positions.iter().flatten().find(|&&p| p as usize >= max) {
        return Err(Error::PositionOutOfRange {
            position: p as usize,
            max,
        });
    }
    Ok(())
}

fn flatten(rows: &[Vec<u32>]) -> Vec<u32> {
    rows.iter().flatten().copied().collect()
}

/// Builds encoder and decoder subgraphs on a shared tape.
pub struct Transformer<'g, 'p, T: Float> {
    pub graph: &'g mut Graph<'p, T>,
}

impl<'g, 'p, T: Float> Transformer<'g, 'p, T> {
    pub fn new(graph: &'g mut Graph<'p, T>) -> Self {
        Self { graph }
    }

    fn params(&self) -> &'p ModelParams<T> {
        self.graph.params()
    }

    fn embed(&mut self, ids: &[u32], positions: &[u32]) -> Var {
        let p = self.params();
        let d = p.config.d_model;
        let scale = T::from_f64((d as f64).sqrt());
        let pe = position_encodings(positions, d);
        let x = self.graph.embed(p.layout.embed, ids, scale, pe);
        self.graph.dropout(x, p.config.dropout)
    }

    fn attention_block(&mut self, x: Var, memory: Var, ids: &AttentionIds, mask: AttentionMask) -> Var {
        let heads = self.params().config.n_heads;
        let q = self.graph.linear(x, ids.q.weight, ids.q.bias);
        let k = self.graph.linear(memory, ids.k.weight, ids.k.bias);
        let v = self.graph.linear(memory, ids.v.weight, ids.v.bias);
        let a = self.graph.attention(q, k, v, heads, mask);
        self.graph.linear(a, ids.o.weight, ids.o.bias)
    }

    fn feed_forward(&mut self, x: Var, ids: &FeedForwardIds) -> Var {
        let h = self.graph.linear(x, ids.hidden.weight, ids.hidden.bias);
        let h = self.graph.relu(h);
        let h = self.graph.dropout(h, self.params().config.dropout);
        self.graph.linear(h, ids.out.weight, ids.out.bias)
    }

    fn residual(&mut self, x: Var, sub: Var) -> Var {
        let sub = self.graph.dropout(sub, self.params().config.dropout);
        self.graph.add(x, sub)
    }

    /// Encode `rows` sequences of equal (padded) length. Returns the memory
    /// (`rows·len × d_model`) and the key-validity flags.
    pub fn encode(&mut self, ids: &[Vec<u32>], positions: &[Vec<u32>]) -> Result<(Var, Vec<bool>)> {
        let p = self.params();
        check_positions(positions, p.config.max_positions)?;
        let rows = ids.len();
        let len = ids.first().map_or(0, Vec::len);
        let flat = flatten(ids);
        let valid: Vec<bool> = flat.iter().map(|&t| t != PAD).collect();
        let mask = AttentionMask {
            batch: rows,
            q_len: len,
            k_len: len,
            key_valid: valid.clone(),
            causal: false,
        };
        let mut x = self.embed(&flat, &flatten(positions));
        for layer in &p.layout.encoder {
            let h = self.graph.layer_norm(x, layer.attn_norm.gain, layer.attn_norm.bias);
            let a = self.attention_block(h, h, &layer.attn, mask.clone());
            x = self.residual(x, a);
            let h = self.graph.layer_norm(x, layer.ffn_norm.gain, layer.ffn_norm.bias);
            let f = self.feed_forward(h, &layer.ffn);
            x = self.residual(x, f);
        }
        let out = self.graph.layer_norm(x, p.layout.enc_norm.gain, p.layout.enc_norm.bias);
        Ok((out, valid))
    }

    /// Decoder hidden states (`rows·dec_len × d_model`) over `memory`.
    pub fn decode(
        &mut self,
        memory: Var,
        memory_valid: &[bool],
        ids: &[Vec<u32>],
        positions: &[Vec<u32>],
    ) -> Result<Var> {
        let p = self.params();
        check_positions(positions, p.config.max_positions)?;
        let rows = ids.len();
        let len = ids.first().map_or(0, Vec::len);
        let mem_len = memory_valid.len().checked_div(rows).unwrap_or(0);
        let flat = flatten(ids);
        let self_mask = AttentionMask {
            batch: rows,
            q_len: len,
            k_len: len,
            key_valid: flat.iter().map(|&t| t != PAD).collect(),
            causal: true,
        };
        let cross_mask = AttentionMask {
            batch: rows,
            q_len: len,
            k_len: mem_len,
            key_valid: memory_valid.to_vec(),
            causal: false,
        };
        let mut x = self.embed(&flat, &flatten(positions));
        for layer in &p.layout.decoder {
            let h = self.graph.layer_norm(x, layer.self_norm.gain, layer.self_norm.bias);
            let a = self.attention_block(h, h, &layer.self_attn, self_mask.clone());
            x = self.residual(x, a);
            let h = self.graph.layer_norm(x, layer.cross_norm.gain, layer.cross_norm.bias);
            let a = self.attention_block(h, memory, &layer.cross_attn, cross_mask.clone());
            x = self.residual(x, a);
            let h = self.graph.layer_norm(x, layer.ffn_norm.gain, layer.ffn_norm.bias);
            let f = self.feed_forward(h, &layer.ffn);
            x = self.residual(x, f);
        }
        Ok(self.graph.layer_norm(x, p.layout.dec_norm.gain, p.layout.dec_norm.bias))
    }

    /// Vocabulary logits through the (tied) output projection.
    pub fn logits(&mut self, hidden: Var) -> Var {
        let p = self.params();
        let table: ParamId = p.layout.output.unwrap_or(p.layout.embed);
        self.graph.project(hidden, table)
    }
}

/// Run the full model on a batch, leaving the tape in `graph`.
pub fn forward_on<T: Float>(graph: &mut Graph<'_, T>, batch: &Batch) -> Result<(Var, Var, LossStats)> {
    let epsilon = graph.params().config.label_smoothing;
    let vocab = graph.params().config.vocab_size;
    for &id in batch.enc_ids.iter().chain(&batch.dec_in_ids).chain(&batch.target_ids).flatten() {
        if id as usize >= vocab {
            return Err(Error::TokenOutOfRange { id, size: vocab });
        }
    }
    let mut tf = Transformer::new(graph);
    let (memory, valid) = tf.encode(&batch.enc_ids, &batch.enc_pos)?;
    let hidden = tf.decode(memory, &valid, &batch.dec_in_ids, &batch.dec_pos)?;
    let logits = tf.logits(hidden);
    let targets = flatten(&batch.target_ids);
    let weights: Vec<T> = batch
        .loss_mask
        .iter()
        .flatten()
        .map(|&m| if m != 0 { T::ONE } else { T::ZERO })
        .collect();
    let (loss, stats) = graph.smoothed_cross_entropy(logits, &targets, &weights, epsilon);
    Ok((logits, loss, stats))
}

fn result<T: Float>(graph: &Graph<'_, T>, logits: Var, loss: Var, stats: LossStats) -> ForwardResult<T> {
    ForwardResult {
        logits: graph.value(logits).clone(),
        loss: graph.value(loss).data[0],
        nll: if stats.tokens == 0 {
            0.0
        } else {
            stats.nll_sum / stats.tokens as f64
        },
        token_count: stats.tokens,
    }
}

pub fn forward<T: Float>(params: &ModelParams<T>, batch: &Batch, mode: RunMode) -> Result<ForwardResult<T>> {
    let mut graph = Graph::new(params);
    if let Some(rng) = mode.dropout {
        graph = graph.with_dropout(rng);
    }
    let (logits, loss, stats) = forward_on(&mut graph, batch)?;
    Ok(result(&graph, logits, loss, stats))
}

/// Forward pass plus exact gradients of `loss_scale · loss`.
pub fn backward<T: Float>(
    params: &ModelParams<T>,
    batch: &Batch,
    mode: RunMode,
    loss_scale: T,
) -> Result<(ForwardResult<T>, ModelParams<T>)> {
    let mut graph = Graph::new(params);
    if let Some(rng) = mode.dropout {
        graph = graph.with_dropout(rng);
    }
    let (logits, loss, stats) = forward_on(&mut graph, batch)?;
    let grads = graph.backward(loss, loss_scale);
    Ok((result(&graph, logits, loss, stats), grads))
}
