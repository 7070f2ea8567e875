//! Model configuration, named parameter tensors, and the checkpoint format.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Float;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub tie_embeddings: bool,
    pub label_smoothing: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 128,
            d_ff: 256,
            dropout: 0.1,
            vocab_size: 1000,
            max_positions: 128,
            tie_embeddings: true,
            label_smoothing: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Index of a tensor in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardIds {
    pub hidden: LinearIds,
    pub out: LinearIds,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerIds {
    pub attn_norm: NormIds,
    pub attn: AttentionIds,
    pub ffn_norm: NormIds,
    pub ffn: FeedForwardIds,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayerIds {
    pub self_norm: NormIds,
    pub self_attn: AttentionIds,
    pub cross_norm: NormIds,
    pub cross_attn: AttentionIds,
    pub ffn_norm: NormIds,
    pub ffn: FeedForwardIds,
}

/// Where each named tensor lives; a pure function of the config.
#[derive(Debug, Clone)]
pub struct Layout {
    pub embed: ParamId,
    /// Separate output projection when embeddings are untied.
    pub output: Option<ParamId>,
    pub encoder: Vec<EncoderLayerIds>,
    pub enc_norm: NormIds,
    pub decoder: Vec<DecoderLayerIds>,
    pub dec_norm: NormIds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: (usize, usize),
    pub init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Uniform with variance `1 / fan_in`, where fan-in is the row count.
    FanIn,
    /// Uniform with variance `1 / cols` (embedding rows).
    Embedding,
    Zeros,
    Ones,
}

struct LayoutBuilder {
    specs: Vec<TensorSpec>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: (usize, usize), init: Init) -> ParamId {
        self.specs.push(TensorSpec { name, shape, init });
        ParamId(self.specs.len() - 1)
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) -> LinearIds {
        LinearIds {
            weight: self.push(format!("{prefix}.weight"), (d_in, d_out), Init::FanIn),
            bias: self.push(format!("{prefix}.bias"), (1, d_out), Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        NormIds {
            gain: self.push(format!("{prefix}.gain"), (1, d), Init::Ones),
            bias: self.push(format!("{prefix}.bias"), (1, d), Init::Zeros),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> AttentionIds {
        AttentionIds {
            q: self.linear(&format!("{prefix}.q"), d, d),
            k: self.linear(&format!("{prefix}.k"), d, d),
            v: self.linear(&format!("{prefix}.v"), d, d),
            o: self.linear(&format!("{prefix}.o"), d, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, ff: usize) -> FeedForwardIds {
        FeedForwardIds {
            hidden: self.linear(&format!("{prefix}.hidden"), d, ff),
            out: self.linear(&format!("{prefix}.out"), ff, d),
        }
    }
}

impl Layout {
    pub fn new(config: &ModelConfig) -> (Self, Vec<TensorSpec>) {
        let (d, ff) = (config.d_model, config.d_ff);
        let mut b = LayoutBuilder { specs: Vec::new() };
        let embed = b.push("embed".into(), (config.vocab_size, d), Init::Embedding);
        let output = (!config.tie_embeddings)
            .then(|| b.push("output".into(), (config.vocab_size, d), Init::Embedding));
        let encoder = (0..config.n_layers)
            .map(|l| EncoderLayerIds {
                attn_norm: b.norm(&format!("enc.{l}.attn_norm"), d),
                attn: b.attention(&format!("enc.{l}.attn"), d),
                ffn_norm: b.norm(&format!("enc.{l}.ffn_norm"), d),
                ffn: b.ffn(&format!("enc.{l}.ffn"), d, ff),
            })
            .collect();
        let enc_norm = b.norm("enc.final_norm", d);
        let decoder = (0..config.n_layers)
            .map(|l| DecoderLayerIds {
                self_norm: b.norm(&format!("dec.{l}.self_norm"), d),
                self_attn: b.attention(&format!("dec.{l}.self_attn"), d),
                cross_norm: b.norm(&format!("dec.{l}.cross_norm"), d),
                cross_attn: b.attention(&format!("dec.{l}.cross_attn"), d),
                ffn_norm: b.norm(&format!("dec.{l}.ffn_norm"), d),
                ffn: b.ffn(&format!("dec.{l}.ffn"), d, ff),
            })
            .collect();
        let dec_norm = b.norm("dec.final_norm", d);
        (
            Self {
                embed,
                output,
                encoder,
                enc_norm,
                decoder,
                dec_norm,
            },
            b.specs,
        )
    }
}

/// Named real tensors plus the layout that indexes them.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub specs: Vec<TensorSpec>,
    pub tensors: Vec<Vec<T>>,
}

impl<T: Float> PartialEq for ModelParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.specs == other.specs && self.tensors == other.tensors
    }
}

impl<T: Float> ModelParams<T> {
    /// Seeded initialization. Same config and seed give identical tensors.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs
            .iter()
            .map(|s| {
                let (rows, cols) = s.shape;
                let uniform = |rng: &mut ChaCha8Rng, var: f64| {
                    let a = (3.0 * var).sqrt();
                    (0..rows * cols)
                        .map(|_| T::from_f64(rng.gen_range(-a..a)))
                        .collect::<Vec<T>>()
                };
                match s.init {
                    Init::FanIn => uniform(&mut rng, 1.0 / rows as f64),
                    Init::Embedding => uniform(&mut rng, 1.0 / cols as f64),
                    Init::Zeros => vec![T::ZERO; rows * cols],
                    Init::Ones => vec![T::ONE; rows * cols],
                }
            })
            .collect();
        Ok(Self {
            config,
            layout,
            specs,
            tensors,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            layout: self.layout.clone(),
            specs: self.specs.clone(),
            tensors: self.tensors.iter().map(|t| vec![T::ZERO; t.len()]).collect(),
        }
    }

    pub fn tensor(&self, id: ParamId) -> &[T] {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.tensors[id.0]
    }

    pub fn shape(&self, id: ParamId) -> (usize, usize) {
        self.specs[id.0].shape
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            layout: self.layout.clone(),
            specs: self.specs.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.iter().map(|&v| U::from_f64(v.to_f64())).collect())
                .collect(),
        }
    }

    /// Sum of squares over every tensor, accumulated in f64.
    pub fn squared_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .map(|&v| {
                let v = v.to_f64();
                v * v
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: (usize, usize),
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    blob_bytes: usize,
    tensors: Vec<ManifestEntry>,
}

const CHECKPOINT_FORMAT: &str = "mlmass-f32le-v1";

/// Write `<stem>.json` (manifest) and `<stem>.bin` (little-endian f32 blob).
pub fn save_tensors(
    stem: &Path,
    config: &ModelConfig,
    specs: &[TensorSpec],
    tensors: &[Vec<f32>],
) -> Result<()> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(specs.len());
    for (spec, t) in specs.iter().zip(tensors) {
        entries.push(ManifestEntry {
            name: spec.name.clone(),
            shape: spec.shape,
            offset: blob.len(),
        });
        for v in t {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        config: *config,
        blob_bytes: blob.len(),
        tensors: entries,
    };
    let json_path = stem.with_extension("json");
    let bin_path = stem.with_extension("bin");
    std::fs::write(&json_path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&json_path, e))?;
    std::fs::write(&bin_path, blob).map_err(|e| Error::io(&bin_path, e))
}

/// Read tensors written by [`save_tensors`], checking names and shapes
/// against `specs`. Returns the stored config alongside.
pub fn load_tensors(stem: &Path, specs: Option<&[TensorSpec]>) -> Result<(ModelConfig, Vec<Vec<f32>>)> {
    let json_path = stem.with_extension("json");
    let bin_path = stem.with_extension("bin");
    let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} (expected {CHECKPOINT_FORMAT})",
            manifest.format
        )));
    }
    let blob = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if blob.len() != manifest.blob_bytes {
        return Err(Error::Checkpoint(format!(
            "blob {} has {} bytes but the manifest declares {}",
            bin_path.display(),
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let owned_specs;
    let specs = match specs {
        Some(s) => s,
        None => {
            owned_specs = Layout::new(&manifest.config).1;
            &owned_specs
        }
    };
    if manifest.tensors.len() != specs.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            manifest.tensors.len(),
            specs.len()
        )));
    }
    let mut tensors = Vec::with_capacity(specs.len());
    for (entry, spec) in manifest.tensors.iter().zip(specs) {
        if entry.name != spec.name {
            return Err(Error::Checkpoint(format!(
                "tensor {} found where {} was expected",
                entry.name, spec.name
            )));
        }
        if entry.shape != spec.shape {
            return Err(Error::Shape {
                name: entry.name.clone(),
                expected: spec.shape,
                found: entry.shape,
            });
        }
        let len = entry.shape.0 * entry.shape.1;
        let end = entry.offset + 4 * len;
        let bytes = blob.get(entry.offset..end).ok_or_else(|| {
            Error::Checkpoint(format!("tensor {} runs past the end of the blob", entry.name))
        })?;
        tensors.push(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        );
    }
    Ok((manifest.config, tensors))
}

impl ModelParams<f32> {
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        save_tensors(stem.as_ref(), &self.config, &self.specs, &self.tensors)
    }

    /// Load a checkpoint whose config is read from its manifest.
    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let (config, tensors) = load_tensors(stem.as_ref(), None)?;
        config.validate()?;
        let (layout, specs) = Layout::new(&config);
        Ok(Self {
            config,
            layout,
            specs,
            tensors,
        })
    }

    /// Load a checkpoint that must match `config` tensor for tensor.
    pub fn load_for(stem: impl AsRef<Path>, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = Layout::new(&config);
        let (_, tensors) = load_tensors(stem.as_ref(), Some(&specs))?;
        Ok(Self {
            config,
            layout,
            specs,
            tensors,
        })
    }
}
