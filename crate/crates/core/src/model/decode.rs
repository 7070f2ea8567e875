//! Greedy and beam-search decoding.
//!
//! Inputs are framed as `[<2tgt>] src [eos]`. Only `eos` and regular
//! pieces may be emitted; reserved tokens and language tags never are.

use super::graph::{Graph, Var};
use super::params::ModelParams;
use super::tensor::{log_softmax, Float};
use super::transformer::Transformer;
use crate::error::Result;
use crate::subword::{BOS, EOS, PAD};

/// What the decoder may emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputFilter {
    pub first_regular: u32,
}

impl OutputFilter {
    fn allowed(&self, id: u32) -> bool {
        id == EOS || id >= self.first_regular
    }
}

/// One finished (or cut-off) beam hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens without the final eos.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    /// Generated length including eos when present.
    pub length: usize,
    pub finished: bool,
}

impl Hypothesis {
    /// `log_prob / length^α`.
    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / (self.length.max(1) as f64).powf(alpha)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutput {
    pub best: Vec<u32>,
    /// Every hypothesis that left the beam, best first.
    pub finished: Vec<Hypothesis>,
    /// Number of (hypothesis, token) expansions scored.
    pub expansions: usize,
}

fn frame(tag: u32, src: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(src.len() + 2);
    v.push(tag);
    v.extend_from_slice(src);
    v.push(EOS);
    v
}

fn pad_to(rows: Vec<Vec<u32>>) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    let positions = rows
        .iter()
        .map(|_| (0..width as u32).collect())
        .collect();
    let ids = rows
        .into_iter()
        .map(|mut r| {
            r.resize(width, PAD);
            r
        })
        .collect();
    (ids, positions)
}

/// Log-probabilities of the next token after each prefix.
fn next_log_probs<T: Float>(
    graph: &mut Graph<'_, T>,
    memory: Var,
    memory_valid: &[bool],
    prefixes: &[Vec<u32>],
) -> Result<Vec<Vec<f64>>> {
    let mark = graph.mark();
    let len = prefixes[0].len();
    let positions: Vec<Vec<u32>> = prefixes.iter().map(|_| (0..len as u32).collect()).collect();
    let last: Vec<usize> = (0..prefixes.len()).map(|r| r * len + len - 1).collect();
    let mut tf = Transformer::new(graph);
    let hidden = tf.decode(memory, memory_valid, prefixes, &positions)?;
    let hidden = tf.graph.select_rows(hidden, &last);
    let logits = tf.logits(hidden);
    let value = graph.value(logits);
    let out = (0..value.rows)
        .map(|r| log_softmax(value.row(r)).into_iter().map(T::to_f64).collect())
        .collect();
    graph.truncate(mark);
    Ok(out)
}

/// Largest decoder length the model's position table allows.
fn step_cap<T: Float>(params: &ModelParams<T>, max_steps: usize) -> usize {
    max_steps.min(params.config.max_positions)
}

/// Greedy decoding of many sources at once. Rows are independent, so the
/// result for a source does not depend on what it is batched with.
pub fn greedy_decode_batch<T: Float>(
    params: &ModelParams<T>,
    srcs: &[Vec<u32>],
    tag: u32,
    max_steps: usize,
    filter: OutputFilter,
) -> Result<Vec<Vec<u32>>> {
    if srcs.is_empty() {
        return Ok(Vec::new());
    }
    let max_steps = step_cap(params, max_steps);
    let mut graph = Graph::new(params);
    let (ids, positions) = pad_to(srcs.iter().map(|s| frame(tag, s)).collect());
    let (memory, valid) = Transformer::new(&mut graph).encode(&ids, &positions)?;

    let mut prefixes: Vec<Vec<u32>> = vec![vec![BOS]; srcs.len()];
    let mut done = vec![false; srcs.len()];
    let mut outputs: Vec<Vec<u32>> = vec![Vec::new(); srcs.len()];
    for _ in 0..max_steps {
        if done.iter().all(|&d| d) {
            break;
        }
        let lp = next_log_probs(&mut graph, memory, &valid, &prefixes)?;
        for (r, row) in lp.iter().enumerate() {
            if done[r] {
                prefixes[r].push(PAD);
                continue;
            }
            let best = argmax_allowed(row, filter);
            if best == EOS {
                done[r] = true;
            } else {
                outputs[r].push(best);
            }
            prefixes[r].push(best);
        }
    }
    Ok(outputs)
}

pub fn greedy_decode<T: Float>(
    params: &ModelParams<T>,
    src: &[u32],
    tag: u32,
    max_steps: usize,
    filter: OutputFilter,
) -> Result<Vec<u32>> {
    Ok(greedy_decode_batch(params, &[src.to_vec()], tag, max_steps, filter)?.remove(0))
}

/// Lowest id among the maxima over allowed ids.
fn argmax_allowed(row: &[f64], filter: OutputFilter) -> u32 {
    let mut best = EOS;
    let mut best_v = row[EOS as usize];
    for (id, &v) in row.iter().enumerate().skip(filter.first_regular as usize) {
        if v > best_v || (v == best_v && (id as u32) < best) {
            best = id as u32;
            best_v = v;
        }
    }
    best
}

/// Beam search. Pruning keeps the `beam_size` best expansions by raw
/// log-probability; the length penalty `α` only ranks the final pool.
pub fn beam_decode<T: Float>(
    params: &ModelParams<T>,
    src: &[u32],
    tag: u32,
    beam_size: usize,
    max_steps: usize,
    alpha: f64,
    filter: OutputFilter,
) -> Result<BeamOutput> {
    let beam_size = beam_size.max(1);
    let max_steps = step_cap(params, max_steps);
    let mut graph = Graph::new(params);
    let (ids, positions) = pad_to(vec![frame(tag, src)]);
    let (memory, valid) = Transformer::new(&mut graph).encode(&ids, &positions)?;
    let mem_len = valid.len();

    // (tokens without bos, cumulative log-prob)
    let mut live: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut expansions = 0;
    for _ in 0..max_steps {
        if live.is_empty() {
            break;
        }
        let rows: Vec<usize> = (0..live.len()).flat_map(|_| 0..mem_len).collect();
        let mark = graph.mark();
        let mem = graph.select_rows(memory, &rows);
        let mem_valid: Vec<bool> = (0..live.len()).flat_map(|_| valid.iter().copied()).collect();
        let prefixes: Vec<Vec<u32>> = live
            .iter()
            .map(|(t, _)| std::iter::once(BOS).chain(t.iter().copied()).collect())
            .collect();
        let lp = next_log_probs(&mut graph, mem, &mem_valid, &prefixes)?;
        graph.truncate(mark);

        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (h, row) in lp.iter().enumerate() {
            for (id, &v) in row.iter().enumerate() {
                if filter.allowed(id as u32) {
                    candidates.push((live[h].1 + v, h, id as u32));
                }
            }
        }
        expansions += candidates.len();
        candidates.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(beam_size);
        for &(score, h, id) in candidates.iter().take(beam_size) {
            let tokens = live[h].0.clone();
            if id == EOS {
                finished.push(Hypothesis {
                    length: tokens.len() + 1,
                    tokens,
                    log_prob: score,
                    finished: true,
                });
            } else {
                let mut tokens = tokens;
                tokens.push(id);
                next.push((tokens, score));
            }
        }
        live = next;
    }
    for (tokens, log_prob) in live {
        finished.push(Hypothesis {
            length: tokens.len(),
            tokens,
            log_prob,
            finished: false,
        });
    }
    finished.sort_by(|a, b| b.score(alpha).total_cmp(&a.score(alpha)));
    let best = finished.first().map(|h| h.tokens.clone()).unwrap_or_default();
    Ok(BeamOutput {
        best,
        finished,
        expansions,
    })
}
