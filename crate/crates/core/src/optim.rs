//! Adam with bias correction and optional global-norm clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{MgtError, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.grad_clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(MgtError::InvalidConfig(format!(
                "bad optimizer settings {self:?}"
            )))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: BTreeMap<String, Vec<f64>>,
    pub second_moment: BTreeMap<String, Vec<f64>>,
}

/// Global L2 norm over all gradients.
pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Factor applied to every gradient before the update.
pub fn clip_factor(norm: f64, clip: Option<f64>) -> f64 {
    match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    }
}

/// One Adam update of every parameter that has a gradient. Returns the
/// pre-clipping global gradient norm.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<f64> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(MgtError::NonFiniteGradient {
                param: name.clone(),
            });
        }
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(MgtError::Dimension {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    let norm = global_norm(grads);
    let scale = clip_factor(norm, config.grad_clip);
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let n = p.len();
        let m = state
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; n]);
        let v = state
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; n]);
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let gi = gi * scale;
            *mi = config.beta1 * *mi + (1.0 - config.beta1) * gi;
            *vi = config.beta2 * *vi + (1.0 - config.beta2) * gi * gi;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *w -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(norm)
}
