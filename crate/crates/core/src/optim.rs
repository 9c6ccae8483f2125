//! Layer-wise adaptive rate scaling (LARS) with momentum, plus the
//! epoch-level warmup / cosine learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderParams;
use crate::error::{Error, Result};
use crate::io::{NamedTensor, TensorMap};
use crate::scalar::{l2_norm, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LarsConfig {
    pub trust_coefficient: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_weights: f64,
    pub lr_bias: f64,
    pub eps: f64,
}

impl Default for LarsConfig {
    fn default() -> Self {
        Self {
            trust_coefficient: 0.001,
            momentum: 0.9,
            weight_decay: 1e-6,
            lr_weights: 0.2,
            lr_bias: 4.8e-3,
            eps: 1e-9,
        }
    }
}

impl LarsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.trust_coefficient > 0.0) {
            return Err(Error::config("trust_coefficient must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::config("weight_decay must be >= 0 and eps > 0"));
        }
        if !(self.lr_weights >= 0.0) || !(self.lr_bias >= 0.0) {
            return Err(Error::config("learning rates must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub decay: Decay,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 10,
            total_epochs: 30,
            decay: Decay::Cosine,
        }
    }
}

/// Learning rate for `epoch` (0-based): linear warmup to `base`, then decay.
pub fn lr_at(epoch: usize, base: f64, sch: &ScheduleConfig) -> Result<f64> {
    if sch.warmup_epochs >= sch.total_epochs {
        return Err(Error::config(format!(
            "warmup ({}) must be shorter than training ({})",
            sch.warmup_epochs, sch.total_epochs
        )));
    }
    if epoch >= sch.total_epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} outside schedule of {} epochs",
            sch.total_epochs
        )));
    }
    if epoch < sch.warmup_epochs {
        return Ok(base * ((epoch + 1) as f64 / sch.warmup_epochs as f64));
    }
    Ok(match sch.decay {
        Decay::Constant => base,
        Decay::Cosine => {
            let progress = (epoch - sch.warmup_epochs) as f64
                / (sch.total_epochs - sch.warmup_epochs) as f64;
            base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    })
}

/// One LARS update of a single tensor in place.
///
/// Weights: `g' = g + wd * w`, local rate `eta * |w| / (|g'| + eps)` when
/// both norms are positive (else 1). Bias tensors use `g' = g` and a local
/// rate of 1. Then `v = momentum * v + local * lr * g'` and `w -= v`.
pub fn lars_step<T: Real>(
    weights: &mut [T],
    grads: &[T],
    buffer: &mut [T],
    is_bias: bool,
    cfg: &LarsConfig,
    lr: f64,
) -> Result<()> {
    if weights.len() != grads.len() || weights.len() != buffer.len() {
        return Err(Error::invalid(format!(
            "shape mismatch: {} weights, {} grads, {} buffer entries",
            weights.len(),
            grads.len(),
            buffer.len()
        )));
    }
    let wd = if is_bias { T::zero() } else { T::of(cfg.weight_decay) };
    let effective: Vec<T> = weights
        .iter()
        .zip(grads)
        .map(|(&w, &g)| g + wd * w)
        .collect();
    let local = if is_bias {
        T::one()
    } else {
        let w_norm = l2_norm(weights);
        let g_norm = l2_norm(&effective);
        if w_norm > T::zero() && g_norm > T::zero() {
            T::of(cfg.trust_coefficient) * w_norm / (g_norm + T::of(cfg.eps))
        } else {
            T::one()
        }
    };
    let step = local * T::of(lr);
    let mom = T::of(cfg.momentum);
    for ((w, v), &g) in weights.iter_mut().zip(buffer.iter_mut()).zip(&effective) {
        *v = mom * *v + step * g;
        *w -= *v;
    }
    Ok(())
}

/// Momentum buffers for a set of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Lars<T> {
    pub config: LarsConfig,
    buffers: BTreeMap<String, (bool, Vec<T>)>,
}

impl<T: Real> Lars<T> {
    pub fn new(config: LarsConfig) -> Self {
        Self {
            config,
            buffers: BTreeMap::new(),
        }
    }

    /// Update every tensor of `params` with the matching tensor in `grads`.
    /// Weight tensors use `lr_weights * factor`; biases use `lr_bias * factor`.
    pub fn step_encoder(
        &mut self,
        prefix: &str,
        params: &mut EncoderParams<T>,
        grads: &EncoderParams<T>,
        lr_weights: f64,
        lr_bias: f64,
    ) -> Result<()> {
        for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
            if p.name != g.name {
                return Err(Error::invalid(format!("tensor order mismatch: {} vs {}", p.name, g.name)));
            }
            self.step_tensor(&format!("{prefix}/{}", p.name), p.is_bias, p.data, g.data, lr_weights, lr_bias)?;
        }
        Ok(())
    }

    pub fn step_tensor(
        &mut self,
        name: &str,
        is_bias: bool,
        weights: &mut [T],
        grads: &[T],
        lr_weights: f64,
        lr_bias: f64,
    ) -> Result<()> {
        let entry = self
            .buffers
            .entry(name.to_owned())
            .or_insert_with(|| (is_bias, vec![T::zero(); weights.len()]));
        let lr = if is_bias { lr_bias } else { lr_weights };
        lars_step(weights, grads, &mut entry.1, is_bias, &self.config, lr)
    }

    pub fn buffer(&self, name: &str) -> Option<&[T]> {
        self.buffers.get(name).map(|(_, b)| b.as_slice())
    }

    /// Store buffers as `opt/<group>/<tensor>` with group `weights` or `bias`.
    pub fn export(&self, map: &mut TensorMap) {
        for (name, (is_bias, buf)) in &self.buffers {
            let group = if *is_bias { "bias" } else { "weights" };
            map.insert(
                format!("opt/{group}/{name}"),
                NamedTensor {
                    dims: vec![buf.len()],
                    values: buf.iter().map(|x| x.as_f32()).collect(),
                },
            );
        }
    }

    pub fn import(config: LarsConfig, map: &TensorMap) -> Self {
        let mut buffers = BTreeMap::new();
        for (key, t) in map.range("opt/".to_owned()..) {
            let Some(rest) = key.strip_prefix("opt/") else { break };
            let (is_bias, name) = if let Some(n) = rest.strip_prefix("bias/") {
                (true, n)
            } else if let Some(n) = rest.strip_prefix("weights/") {
                (false, n)
            } else {
                continue;
            };
            buffers.insert(
                name.to_owned(),
                (is_bias, t.values.iter().map(|&x| T::of(f64::from(x))).collect()),
            );
        }
        Self { config, buffers }
    }
}
