//! Co-training loop: translation and MASS batches through one model and
//! one Adam optimizer.
//!
//! A run directory holds `vocab.txt`, `metrics.jsonl` (deterministic),
//! `throughput.jsonl` (wall-clock, not deterministic), numbered
//! checkpoints under `checkpoints/`, `final/`, and `best/` when a dev set
//! is supplied. Every checkpoint directory is self-contained: model, vocab,
//! optimizer moments and the sampler position.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{Batch, Objective};
use crate::corpus::CorpusRegistry;
use crate::error::{Error, Result};
use crate::mass::MaskSpec;
use crate::model::params::{load_tensors, save_tensors};
use crate::model::{backward, forward, ModelConfig, ModelParams, RunMode};
use crate::sampler::{Sampler, SamplerState, SamplingPolicy};
use crate::subword::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub adam: AdamConfig,
    pub warmup_steps: u64,
    /// Multiplier on the inverse-square-root schedule.
    pub lr_scale: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 5000,
            adam: AdamConfig::default(),
            warmup_steps: 4000,
            lr_scale: 1.0,
            clip_norm: Some(1.0),
            checkpoint_every: 1000,
            log_every: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.warmup_steps < 1 {
            return bad("warmup_steps must be at least 1");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm must be positive");
            }
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return bad("lr_scale must be positive and finite");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1");
        }
        Ok(())
    }
}

/// `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)` for `step ≥ 1`.
pub fn lr_at(step: u64, d_model: usize, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub objective: Objective,
    /// Direction (`src-tgt`) or language of the batch.
    pub unit: String,
    pub loss: f64,
    pub nll: f64,
    pub tokens: usize,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Throughput {
    step: u64,
    tokens_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

fn dropout_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Backward, clip, Adam update. Advances `opt.step`.
pub fn train_step(
    params: &mut ModelParams<f32>,
    opt: &mut OptimizerState,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<MetricsRecord> {
    let step = opt.step + 1;
    let mode = RunMode {
        dropout: (params.config.dropout > 0.0).then(|| dropout_rng(config.seed, step)),
    };
    let (res, grads) = backward(params, batch, mode, 1.0)?;
    let loss = res.loss as f64;
    if !loss.is_finite() {
        let header = batch.header();
        log::error!("non-finite loss at step {step} on batch {header}");
        return Err(Error::NonFiniteLoss { step, header });
    }
    let grad_norm = grads.squared_norm().sqrt();
    let clip = match config.clip_norm {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };
    let lr = config.lr_scale * lr_at(step, params.config.d_model, config.warmup_steps);
    let AdamConfig { beta1, beta2, eps } = config.adam;
    let c1 = 1.0 - beta1.powf(step as f64);
    let c2 = 1.0 - beta2.powf(step as f64);
    for (t, g) in grads.tensors.iter().enumerate() {
        let (p, m, v) = (&mut params.tensors[t], &mut opt.m[t], &mut opt.v[t]);
        for i in 0..g.len() {
            let gi = g[i] as f64 * clip;
            let mi = beta1 * m[i] as f64 + (1.0 - beta1) * gi;
            let vi = beta2 * v[i] as f64 + (1.0 - beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            p[i] = (p[i] as f64 - update) as f32;
        }
    }
    opt.step = step;
    Ok(MetricsRecord {
        step,
        objective: batch.objective,
        unit: batch.unit.clone(),
        loss,
        nll: res.nll,
        tokens: res.token_count,
        grad_norm,
        lr,
    })
}

/// Token-weighted mean unsmoothed NLL over `batches`.
pub fn dev_loss(params: &ModelParams<f32>, batches: &[Batch]) -> Result<f64> {
    let (mut sum, mut tokens) = (0.0, 0usize);
    for b in batches {
        let res = forward(params, b, RunMode::eval())?;
        sum += res.nll * res.token_count as f64;
        tokens += res.token_count;
    }
    Ok(if tokens == 0 { 0.0 } else { sum / tokens as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunState {
    step: u64,
    sampler: SamplerState,
    best_dev: Option<(u64, f64)>,
}

/// Everything `train` needs besides the corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub policy: SamplingPolicy,
    #[serde(default)]
    pub mask: MaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub best_dev_loss: Option<f64>,
    pub last: Option<MetricsRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Checkpoint directory to continue from.
    pub resume: Option<PathBuf>,
    /// Held-out batches scored at each checkpoint to pick `best/`.
    pub dev: Vec<Batch>,
}

const MODEL: &str = "model";
const ADAM_M: &str = "adam_m";
const ADAM_V: &str = "adam_v";
const STATE: &str = "state.json";
const VOCAB: &str = "vocab.txt";

pub fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step-{step:08}"))
}

fn write_checkpoint(
    dir: &Path,
    params: &ModelParams<f32>,
    opt: &OptimizerState,
    vocab: &Vocabulary,
    state: &RunState,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    params.save(dir.join(MODEL))?;
    save_tensors(&dir.join(ADAM_M), &params.config, &params.specs, &opt.m)?;
    save_tensors(&dir.join(ADAM_V), &params.config, &params.specs, &opt.v)?;
    vocab.save(dir.join(VOCAB))?;
    let path = dir.join(STATE);
    fs::write(&path, serde_json::to_string_pretty(state)?).map_err(|e| Error::io(&path, e))
}

fn write_model(dir: &Path, params: &ModelParams<f32>, vocab: &Vocabulary) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    params.save(dir.join(MODEL))?;
    vocab.save(dir.join(VOCAB))
}

/// Load the model and vocabulary stored in a checkpoint directory.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ModelParams<f32>, Vocabulary)> {
    let dir = dir.as_ref();
    let params = ModelParams::load(dir.join(MODEL))?;
    let vocab = Vocabulary::load(dir.join(VOCAB))?;
    if vocab.len() != params.config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "{}: vocabulary has {} pieces but the model expects {}",
            dir.display(),
            vocab.len(),
            params.config.vocab_size
        )));
    }
    Ok((params, vocab))
}

fn read_state(dir: &Path, config: ModelConfig) -> Result<(ModelParams<f32>, OptimizerState, RunState)> {
    let params = ModelParams::load_for(dir.join(MODEL), config)?;
    let (_, m) = load_tensors(&dir.join(ADAM_M), Some(&params.specs))?;
    let (_, v) = load_tensors(&dir.join(ADAM_V), Some(&params.specs))?;
    let path = dir.join(STATE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let state: RunState = serde_json::from_str(&text)?;
    let opt = OptimizerState {
        step: state.step,
        m,
        v,
    };
    Ok((params, opt, state))
}

/// Keep only records with `step <= upto`, so a resumed run appends to
/// exactly the log an unbroken run would have written.
fn truncate_log(path: &Path, upto: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let step = serde_json::from_str::<serde_json::Value>(&line)
            .ok()
            .and_then(|v| v.get("step").and_then(|s| s.as_u64()))
            .ok_or_else(|| Error::Malformed {
                file: path.display().to_string(),
                line: i + 1,
                reason: "record without a step".into(),
            })?;
        if step <= upto {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn append(path: &Path) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

fn write_line<T: Serialize>(w: &mut BufWriter<File>, path: &Path, record: &T) -> Result<()> {
    let line = serde_json::to_string(record)?;
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

/// Run `job.train.total_steps` steps over the sampler stream, writing
/// everything under `out`.
pub fn train(
    registry: &CorpusRegistry,
    vocab: &Vocabulary,
    job: &TrainJob,
    out: &Path,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    job.train.validate()?;
    job.model.validate()?;
    if job.model.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocab_size {} differs from the vocabulary's {} pieces",
            job.model.vocab_size,
            vocab.len()
        )));
    }
    if job.policy.max_len + 1 > job.model.max_positions {
        return Err(Error::Config(format!(
            "max_len {} needs at least {} positions, model has {}",
            job.policy.max_len,
            job.policy.max_len + 1,
            job.model.max_positions
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    vocab.save(out.join(VOCAB))?;

    let mut sampler = Sampler::new(registry, job.policy, job.mask, vocab)?;
    let metrics_path = out.join("metrics.jsonl");
    let throughput_path = out.join("throughput.jsonl");
    let (mut params, mut opt, mut best_dev) = match &options.resume {
        Some(dir) => {
            let (params, opt, state) = read_state(dir, job.model)?;
            sampler.restore(state.sampler);
            truncate_log(&metrics_path, state.step)?;
            truncate_log(&throughput_path, state.step)?;
            log::info!("resuming {} at step {}", out.display(), state.step);
            (params, opt, state.best_dev)
        }
        None => {
            for p in [&metrics_path, &throughput_path] {
                if p.exists() {
                    fs::remove_file(p).map_err(|e| Error::io(p, e))?;
                }
            }
            let params = ModelParams::<f32>::init(job.model, job.train.seed)?;
            let opt = OptimizerState::new(&params);
            (params, opt, None)
        }
    };
    let mut metrics = append(&metrics_path)?;
    let mut throughput = append(&throughput_path)?;
    let best_dir = out.join("best");
    let mut last = None;
    let mut window = (Instant::now(), 0usize);

    while opt.step < job.train.total_steps {
        let batch = sampler.next_batch();
        let record = train_step(&mut params, &mut opt, &batch, &job.train)?;
        let step = record.step;
        window.1 += record.tokens;
        if step % job.train.log_every == 0 || step == job.train.total_steps {
            write_line(&mut metrics, &metrics_path, &record)?;
            let secs = window.0.elapsed().as_secs_f64();
            let rate = Throughput {
                step,
                tokens_per_sec: if secs > 0.0 { window.1 as f64 / secs } else { 0.0 },
            };
            write_line(&mut throughput, &throughput_path, &rate)?;
            log::debug!(
                "step {step} {} loss {:.4} lr {:.2e} ({:.0} tok/s)",
                record.unit,
                record.loss,
                record.lr,
                rate.tokens_per_sec
            );
            window = (Instant::now(), 0);
        }
        let at_checkpoint = job.train.checkpoint_every > 0 && step % job.train.checkpoint_every == 0;
        if at_checkpoint || step == job.train.total_steps {
            if !options.dev.is_empty() {
                let loss = dev_loss(&params, &options.dev)?;
                if best_dev.is_none_or(|(_, b)| loss < b) {
                    best_dev = Some((step, loss));
                    write_model(&best_dir, &params, vocab)?;
                }
            }
            let state = RunState {
                step,
                sampler: sampler.state(),
                best_dev,
            };
            metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
            throughput.flush().map_err(|e| Error::io(&throughput_path, e))?;
            if at_checkpoint {
                write_checkpoint(&checkpoint_dir(out, step), &params, &opt, vocab, &state)?;
            }
            if step == job.train.total_steps {
                write_checkpoint(&out.join("final"), &params, &opt, vocab, &state)?;
            }
        }
        last = Some(record);
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    throughput.flush().map_err(|e| Error::io(&throughput_path, e))?;
    if !out.join("final").join(STATE).exists() {
        // Resumed at (or past) the last step: nothing ran, but the final
        // checkpoint must still exist.
        let state = RunState {
            step: opt.step,
            sampler: sampler.state(),
            best_dev,
        };
        write_checkpoint(&out.join("final"), &params, &opt, vocab, &state)?;
    }
    Ok(TrainOutcome {
        final_checkpoint: out.join("final"),
        best_checkpoint: best_dev.map(|_| best_dir),
        best_dev_loss: best_dev.map(|(_, l)| l),
        last,
    })
}
