//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Operations are coarse (a whole linear layer, a whole multi-head
//! attention block) so the tape stays short and each backward rule is a
//! handful of matrix kernels. Parameters are read in place from
//! [`ModelParams`] and their gradients land in a tensor set of the same
//! layout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{ModelParams, ParamId};
use super::tensor::{gemm_nn, gemm_tn, transpose, Float, Matrix};

const LN_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Shape information for a batched multi-head attention call.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// `batch × k_len` flags; false keys are never attended.
    pub key_valid: Vec<bool>,
    pub causal: bool,
}

enum Op<T> {
    Constant,
    Embed {
        table: ParamId,
        ids: Vec<u32>,
        scale: T,
    },
    Linear {
        x: Var,
        weight: ParamId,
        bias: ParamId,
    },
    /// `x · tableᵀ`, the output projection onto the vocabulary.
    Project {
        x: Var,
        table: ParamId,
    },
    Add(Var, Var),
    LayerNorm {
        x: Var,
        gain: ParamId,
        bias: ParamId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: AttentionMask,
        probs: Vec<T>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    SmoothedCrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        weights: Vec<T>,
        epsilon: T,
        denom: T,
    },
}

/// Outputs of the loss node besides its value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossStats {
    /// Unsmoothed negative log-likelihood summed over weighted positions.
    pub nll_sum: f64,
    pub tokens: usize,
}

fn grad_slot<T: Float>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::ZERO; len])
}

pub struct Graph<'p, T: Float> {
    params: &'p ModelParams<T>,
    values: Vec<Matrix<T>>,
    ops: Vec<Op<T>>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'p, T: Float> Graph<'p, T> {
    pub fn new(params: &'p ModelParams<T>) -> Self {
        Self {
            params,
            values: Vec::new(),
            ops: Vec::new(),
            dropout_rng: None,
        }
    }

    /// Enable dropout, drawing masks from `rng`.
    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    pub fn params(&self) -> &'p ModelParams<T> {
        self.params
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    /// Current tape length, for [`Graph::truncate`].
    pub fn mark(&self) -> usize {
        self.values.len()
    }

    /// Drop every node recorded after `mark`.
    pub fn truncate(&mut self, mark: usize) {
        self.values.truncate(mark);
        self.ops.truncate(mark);
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.values[v.0]
    }

    pub fn constant(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Constant)
    }

    /// Rows `table[ids[r]] * scale + offsets[r]`.
    pub fn embed(&mut self, table: ParamId, ids: &[u32], scale: T, offsets: Matrix<T>) -> Var {
        let (_, d) = self.params.shape(table);
        let t = self.params.tensor(table);
        let mut out = offsets;
        assert_eq!((out.rows, out.cols), (ids.len(), d));
        for (r, &id) in ids.iter().enumerate() {
            let src = &t[id as usize * d..(id as usize + 1) * d];
            for (o, &e) in out.row_mut(r).iter_mut().zip(src) {
                *o += e * scale;
            }
        }
        self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
                scale,
            },
        )
    }

    pub fn linear(&mut self, x: Var, weight: ParamId, bias: ParamId) -> Var {
        let (d_in, d_out) = self.params.shape(weight);
        let xv = &self.values[x.0];
        assert_eq!(xv.cols, d_in, "linear input width");
        let b = self.params.tensor(bias);
        let mut out = Matrix::zeros(xv.rows, d_out);
        for r in 0..xv.rows {
            out.row_mut(r).copy_from_slice(b);
        }
        gemm_nn(xv.rows, d_in, d_out, &xv.data, self.params.tensor(weight), &mut out.data);
        self.push(out, Op::Linear { x, weight, bias })
    }

    pub fn project(&mut self, x: Var, table: ParamId) -> Var {
        let (vocab, d) = self.params.shape(table);
        let xv = &self.values[x.0];
        assert_eq!(xv.cols, d, "projection input width");
        let table_t = transpose(vocab, d, self.params.tensor(table));
        let mut out = Matrix::zeros(xv.rows, vocab);
        gemm_nn(xv.rows, d, vocab, &xv.data, &table_t, &mut out.data);
        self.push(out, Op::Project { x, table })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "add shapes");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x + y).collect();
        let out = Matrix::from_vec(av.rows, av.cols, data);
        self.push(out, Op::Add(a, b))
    }

    pub fn layer_norm(&mut self, x: Var, gain: ParamId, bias: ParamId) -> Var {
        let xv = &self.values[x.0];
        let d = xv.cols;
        let (g, b) = (self.params.tensor(gain), self.params.tensor(bias));
        let inv_d = T::from_f64(1.0 / d as f64);
        let eps = T::from_f64(LN_EPS);
        let mut out = Matrix::zeros(xv.rows, d);
        let mut xhat = vec![T::ZERO; xv.rows * d];
        let mut rstd = vec![T::ZERO; xv.rows];
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().fold(T::ZERO, |a, &v| a + v) * inv_d;
            let var = row.iter().fold(T::ZERO, |a, &v| a + (v - mean) * (v - mean)) * inv_d;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            let xh = &mut xhat[r * d..(r + 1) * d];
            for ((h, o), ((&v, &gv), &bv)) in xh
                .iter_mut()
                .zip(out.row_mut(r))
                .zip(row.iter().zip(g).zip(b))
            {
                *h = (v - mean) * rs;
                *o = *h * gv + bv;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = &self.values[x.0];
        let data = xv.data.iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect();
        let out = Matrix::from_vec(xv.rows, xv.cols, data);
        self.push(out, Op::Relu(x))
    }

    /// Inverted dropout; the identity when no dropout rng is set or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let xv = &self.values[x.0];
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..xv.data.len())
            .map(|_| if rng.gen::<f64>() < p { T::ZERO } else { keep })
            .collect();
        let data = xv.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Matrix::from_vec(xv.rows, xv.cols, data);
        self.push(out, Op::Dropout { x, mask })
    }

    /// Scaled dot-product attention with `heads` heads over row blocks.
    /// `q` has `batch·q_len` rows, `k` and `v` have `batch·k_len` rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttentionMask) -> Var {
        let (qv, kv, vv) = (&self.values[q.0], &self.values[k.0], &self.values[v.0]);
        let d = qv.cols;
        let dh = d / heads;
        let AttentionMask {
            batch,
            q_len,
            k_len,
            ..
        } = mask;
        assert_eq!(qv.rows, batch * q_len, "query rows");
        assert_eq!(kv.rows, batch * k_len, "key rows");
        assert_eq!(vv.rows, batch * k_len, "value rows");
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = Matrix::zeros(qv.rows, d);
        let mut probs = vec![T::ZERO; batch * heads * q_len * k_len];
        let mut scores = vec![T::ZERO; k_len];
        for b in 0..batch {
            let valid = &mask.key_valid[b * k_len..(b + 1) * k_len];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..q_len {
                    let qrow = &qv.row(b * q_len + i)[cols.clone()];
                    let limit = if mask.causal { (i + 1).min(k_len) } else { k_len };
                    let mut max = None::<T>;
                    for j in 0..limit {
                        if !valid[j] {
                            continue;
                        }
                        let krow = &kv.row(b * k_len + j)[cols.clone()];
                        let s = qrow.iter().zip(krow).fold(T::ZERO, |a, (&x, &y)| a + x * y) * scale;
                        scores[j] = s;
                        max = Some(max.map_or(s, |m: T| m.max(s)));
                    }
                    let Some(max) = max else { continue };
                    let p = &mut probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    let mut total = T::ZERO;
                    for j in 0..limit {
                        if valid[j] {
                            p[j] = (scores[j] - max).exp();
                            total += p[j];
                        }
                    }
                    let orow = &mut out.row_mut(b * q_len + i)[cols.clone()];
                    for j in 0..limit {
                        if !valid[j] {
                            continue;
                        }
                        p[j] /= total;
                        let pj = p[j];
                        let vrow = &vv.row(b * k_len + j)[cols.clone()];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            },
        )
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = &self.values[x.0];
        let mut out = Matrix::zeros(rows.len(), xv.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Mean label-smoothed cross-entropy over rows with nonzero weight.
    /// The smoothed target puts `1 - ε + ε/V` on the gold id and `ε/V` on
    /// every other id. Returns a 1×1 node (zero when no row is weighted).
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        weights: &[T],
        epsilon: f64,
    ) -> (Var, LossStats) {
        let lv = &self.values[logits.0];
        assert_eq!(lv.rows, targets.len());
        assert_eq!(lv.rows, weights.len());
        let vocab = lv.cols;
        let eps = T::from_f64(epsilon);
        let uniform = eps / T::from_f64(vocab as f64);
        let denom = weights.iter().fold(T::ZERO, |a, &w| a + w);
        let mut loss_sum = T::ZERO;
        let mut nll_sum = 0.0;
        let mut tokens = 0;
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w == T::ZERO {
                continue;
            }
            tokens += 1;
            let logp = super::tensor::log_softmax(lv.row(r));
            let nll = -logp[t as usize];
            let mean_neg = logp.iter().fold(T::ZERO, |a, &v| a - v);
            let row_loss = (T::ONE - eps) * nll + uniform * mean_neg;
            loss_sum += w * row_loss;
            nll_sum += (w * nll).to_f64();
        }
        let value = if denom > T::ZERO { loss_sum / denom } else { T::ZERO };
        let out = Matrix::from_vec(1, 1, vec![value]);
        let var = self.push(
            out,
            Op::SmoothedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                epsilon: eps,
                denom,
            },
        );
        (var, LossStats { nll_sum, tokens })
    }

    /// Reverse pass from a 1×1 node, seeded with `seed`.
    pub fn backward(&self, root: Var, seed: T) -> ModelParams<T> {
        let mut pgrads = self.params.zeros_like();
        let mut grads: Vec<Option<Vec<T>>> = (0..self.values.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![seed]);
        macro_rules! grad_of {
            ($v:expr) => {{
                let v: Var = $v;
                grad_slot(&mut grads, v, self.values[v.0].data.len())
            }};
        }

        for idx in (0..self.values.len()).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let out = &self.values[idx];
            match &self.ops[idx] {
                Op::Constant => {}
                Op::Embed { table, ids, scale } => {
                    let d = out.cols;
                    let g = pgrads.tensor_mut(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut g[id as usize * d..(id as usize + 1) * d];
                        for (o, &v) in dst.iter_mut().zip(&dy[r * d..(r + 1) * d]) {
                            *o += v * *scale;
                        }
                    }
                }
                Op::Linear { x, weight, bias } => {
                    let xv = &self.values[x.0];
                    let (d_in, d_out) = self.params.shape(*weight);
                    let n = xv.rows;
                    {
                        let gb = pgrads.tensor_mut(*bias);
                        for row in dy.chunks_exact(d_out) {
                            for (o, &v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                    gemm_tn(n, d_in, d_out, &xv.data, &dy, pgrads.tensor_mut(*weight));
                    let wt = transpose(d_in, d_out, self.params.tensor(*weight));
                    let dx = grad_of!(*x);
                    gemm_nn(n, d_out, d_in, &dy, &wt, dx);
                }
                Op::Project { x, table } => {
                    let xv = &self.values[x.0];
                    let (vocab, d) = self.params.shape(*table);
                    gemm_tn(xv.rows, vocab, d, &dy, &xv.data, pgrads.tensor_mut(*table));
                    let dx = grad_of!(*x);
                    gemm_nn(xv.rows, vocab, d, &dy, self.params.tensor(*table), dx);
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        let g = grad_of!(v);
                        for (o, &x) in g.iter_mut().zip(&dy) {
                            *o += x;
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let d = out.cols;
                    let inv_d = T::from_f64(1.0 / d as f64);
                    let g = self.params.tensor(*gain);
                    {
                        let gg = pgrads.tensor_mut(*gain);
                        for (dyr, xhr) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for ((o, &a), &b) in gg.iter_mut().zip(dyr).zip(xhr) {
                                *o += a * b;
                            }
                        }
                    }
                    {
                        let gb = pgrads.tensor_mut(*bias);
                        for dyr in dy.chunks_exact(d) {
                            for (o, &a) in gb.iter_mut().zip(dyr) {
                                *o += a;
                            }
                        }
                    }
                    let dx = grad_of!(*x);
                    let mut dxhat = vec![T::ZERO; d];
                    for r in 0..out.rows {
                        let dyr = &dy[r * d..(r + 1) * d];
                        let xhr = &xhat[r * d..(r + 1) * d];
                        let mut sum = T::ZERO;
                        let mut dot = T::ZERO;
                        for c in 0..d {
                            dxhat[c] = dyr[c] * g[c];
                            sum += dxhat[c];
                            dot += dxhat[c] * xhr[c];
                        }
                        let dxr = &mut dx[r * d..(r + 1) * d];
                        for c in 0..d {
                            dxr[c] += rstd[r] * (dxhat[c] - inv_d * (sum + xhr[c] * dot));
                        }
                    }
                }
                Op::Relu(x) => {
                    let dx = grad_of!(*x);
                    for ((o, &g), &y) in dx.iter_mut().zip(&dy).zip(&out.data) {
                        if y > T::ZERO {
                            *o += g;
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    let dx = grad_of!(*x);
                    for ((o, &g), &m) in dx.iter_mut().zip(&dy).zip(mask) {
                        *o += g * m;
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    mask,
                    probs,
                } => {
                    let (qv, kv, vv) = (&self.values[q.0], &self.values[k.0], &self.values[v.0]);
                    let d = qv.cols;
                    let dh = d / heads;
                    let (batch, q_len, k_len) = (mask.batch, mask.q_len, mask.k_len);
                    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                    let mut dq = vec![T::ZERO; qv.data.len()];
                    let mut dk = vec![T::ZERO; kv.data.len()];
                    let mut dv = vec![T::ZERO; vv.data.len()];
                    let mut dp = vec![T::ZERO; k_len];
                    for b in 0..batch {
                        for h in 0..*heads {
                            let c0 = h * dh;
                            for i in 0..q_len {
                                let p = &probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                                let qr = (b * q_len + i) * d + c0;
                                let dor = &dy[qr..qr + dh];
                                let mut weighted = T::ZERO;
                                for j in 0..k_len {
                                    if p[j] == T::ZERO {
                                        dp[j] = T::ZERO;
                                        continue;
                                    }
                                    let kr = (b * k_len + j) * d + c0;
                                    let vrow = &vv.data[kr..kr + dh];
                                    dp[j] = dor.iter().zip(vrow).fold(T::ZERO, |a, (&x, &y)| a + x * y);
                                    weighted += p[j] * dp[j];
                                    for (o, &g) in dv[kr..kr + dh].iter_mut().zip(dor) {
                                        *o += p[j] * g;
                                    }
                                }
                                for j in 0..k_len {
                                    if p[j] == T::ZERO {
                                        continue;
                                    }
                                    let ds = p[j] * (dp[j] - weighted) * scale;
                                    let kr = (b * k_len + j) * d + c0;
                                    for c in 0..dh {
                                        dq[qr + c] += ds * kv.data[kr + c];
                                        dk[kr + c] += ds * qv.data[qr + c];
                                    }
                                }
                            }
                        }
                    }
                    for (var, g) in [(*q, dq), (*k, dk), (*v, dv)] {
                        let dst = grad_of!(var);
                        for (o, x) in dst.iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                }
                Op::SelectRows { x, rows } => {
                    let cols = out.cols;
                    let dx = grad_of!(*x);
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..cols {
                            dx[r * cols + c] += dy[i * cols + c];
                        }
                    }
                }
                Op::SmoothedCrossEntropy {
                    logits,
                    targets,
                    weights,
                    epsilon,
                    denom,
                } => {
                    if *denom <= T::ZERO {
                        continue;
                    }
                    let lv = &self.values[logits.0];
                    let vocab = lv.cols;
                    let uniform = *epsilon / T::from_f64(vocab as f64);
                    let dl = grad_of!(*logits);
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == T::ZERO {
                            continue;
                        }
                        let coef = dy[0] * w / *denom;
                        let logp = super::tensor::log_softmax(lv.row(r));
                        let row = &mut dl[r * vocab..(r + 1) * vocab];
                        for (c, (o, &lp)) in row.iter_mut().zip(&logp).enumerate() {
                            let mut target = uniform;
                            if c == t as usize {
                                target += T::ONE - *epsilon;
                            }
                            *o += coef * (lp.exp() - target);
                        }
                    }
                }
            }
        }
        pgrads
    }
}
