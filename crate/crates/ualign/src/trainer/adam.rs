//! Bias-corrected Adam with global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::param::Param;

#[derive(Clone, Copy, Debug)]
pub struct AdamSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        AdamSettings {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// Optimizer state: step count plus first/second moments per tensor, in the
/// same fixed order as the parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[&Param]) -> AdamState {
        AdamState {
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One Adam step over all parameters, reading the paired gradients.
/// Clipping rescales every gradient when the global norm exceeds the clip.
pub fn adam_step(
    params: &mut [&mut Param],
    state: &mut AdamState,
    settings: &AdamSettings,
) -> Result<()> {
    assert_eq!(params.len(), state.m.len(), "optimizer/parameter mismatch");
    for p in params.iter() {
        if !p.grad_finite() {
            return Err(Error::NonFiniteGradient {
                tensor: p.name.clone(),
            });
        }
    }
    let mut sq = 0.0;
    for p in params.iter() {
        for &g in &p.grad {
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    let scale = if settings.clip_norm > 0.0 && norm > settings.clip_norm {
        settings.clip_norm / norm
    } else {
        1.0
    };

    state.t += 1;
    let t = state.t;
    let bc1 = 1.0 - settings.beta1.powi(t as i32);
    let bc2 = 1.0 - settings.beta2.powi(t as i32);
    for (pi, p) in params.iter_mut().enumerate() {
        let m = &mut state.m[pi];
        let v = &mut state.v[pi];
        for k in 0..p.len() {
            let g = p.grad[k] * scale;
            m[k] = settings.beta1 * m[k] + (1.0 - settings.beta1) * g;
            v[k] = settings.beta2 * v[k] + (1.0 - settings.beta2) * g * g;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            p.value[k] -= settings.lr * mhat / (vhat.sqrt() + settings.eps);
        }
        if !p.all_finite() {
            return Err(Error::NonFiniteGradient {
                tensor: p.name.clone(),
            });
        }
    }
    Ok(())
}
