//! Central finite-difference check of [`backward`](super::backward).

use serde::{Deserialize, Serialize};

use super::params::ModelParams;
use super::transformer::{backward, forward, RunMode};
use crate::batch::Batch;
use crate::error::Result;

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub floor: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn coords(&self) -> usize {
        self.tensors.iter().map(|t| t.coords).sum()
    }
}

/// Compare analytic gradients with central differences of step `h` for
/// every coordinate of every tensor. Runs in f64 without dropout.
pub fn grad_check(params: &ModelParams<f64>, batch: &Batch, h: f64, floor: f64) -> Result<GradCheckReport> {
    let (_, grads) = backward(params, batch, RunMode::eval(), 1.0)?;
    let mut probe = params.clone();
    let mut tensors = Vec::with_capacity(params.tensors.len());
    for (t, spec) in params.specs.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for i in 0..params.tensors[t].len() {
            let orig = probe.tensors[t][i];
            probe.tensors[t][i] = orig + h;
            let plus = forward(&probe, batch, RunMode::eval())?.loss;
            probe.tensors[t][i] = orig - h;
            let minus = forward(&probe, batch, RunMode::eval())?.loss;
            probe.tensors[t][i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.tensors[t][i];
            max_rel = max_rel.max(relative_error(analytic, numeric, floor));
            max_abs = max_abs.max((analytic - numeric).abs());
        }
        tensors.push(TensorCheck {
            name: spec.name.clone(),
            coords: params.tensors[t].len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(GradCheckReport {
        step: h,
        floor,
        tensors,
    })
}
