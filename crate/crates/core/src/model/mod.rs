//! Transformer encoder-decoder with its own reverse-mode differentiation.

pub mod decode;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;
pub mod transformer;

pub use decode::{beam_decode, greedy_decode, greedy_decode_batch, BeamOutput, Hypothesis, OutputFilter};
pub use params::{ModelConfig, ModelParams, ParamId};
pub use tensor::{Float, Matrix};
pub use transformer::{backward, forward, ForwardResult, RunMode};
