//! Effective rank, rank profiles, β statistics, the synergy coefficient and
//! copy accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{MgtError, Result};
use crate::linalg::singular_values;
use crate::model::LayerTrace;
use crate::tensor::Tensor;

/// Singular values below this fraction of the largest are left out of the entropy.
pub const RANK_CUTOFF: f64 = 1e-12;

/// `exp(H(σ̂)) / min(S, D)` where `σ̂` are the singular values normalized to
/// sum to one and `H` is their Shannon entropy (natural log).
pub fn effective_rank(x: &Tensor) -> Result<f64> {
    let spectrum = singular_values(x)?;
    let (s, d) = spectrum.source_shape;
    let largest = spectrum.values.first().copied().unwrap_or(0.0);
    if largest <= 0.0 {
        return Err(MgtError::DegenerateInput(
            "effective rank of an all-zero matrix".into(),
        ));
    }
    let kept: Vec<f64> = spectrum
        .values
        .iter()
        .copied()
        .filter(|&v| v >= RANK_CUTOFF * largest)
        .collect();
    let total: f64 = kept.iter().sum();
    let entropy: f64 = kept
        .iter()
        .map(|&v| {
            let p = v / total;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp() / s.min(d) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankProfile {
    /// Entry 0 is the post-embedding state; entry `l` follows layer `l`.
    pub per_layer: Vec<f64>,
    /// Last entry over first entry.
    pub preservation_ratio: f64,
    /// Least-squares slope of `ln(rank)` against layer index.
    pub decay_rate: f64,
}

impl RankProfile {
    pub fn from_ranks(per_layer: Vec<f64>) -> Result<Self> {
        if per_layer.len() < 2 {
            return Err(MgtError::Contract(
                "a rank profile needs at least two layers".into(),
            ));
        }
        if per_layer.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(MgtError::DegenerateInput(
                "rank profile entries must be positive".into(),
            ));
        }
        let n = per_layer.len() as f64;
        let mean_x = (n - 1.0) / 2.0;
        let logs: Vec<f64> = per_layer.iter().map(|r| r.ln()).collect();
        let mean_y = logs.iter().sum::<f64>() / n;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (i, y) in logs.iter().enumerate() {
            let dx = i as f64 - mean_x;
            sxy += dx * (y - mean_y);
            sxx += dx * dx;
        }
        Ok(Self {
            preservation_ratio: per_layer[per_layer.len() - 1] / per_layer[0],
            decay_rate: sxy / sxx,
            per_layer,
        })
    }
}

fn batch_mean_rank(state: &Tensor, batch: usize, seq: usize) -> Result<f64> {
    let mut total = 0.0;
    for b in 0..batch {
        total += effective_rank(&state.row_slice(b * seq, (b + 1) * seq)?)?;
    }
    Ok(total / batch as f64)
}

/// Per-layer effective rank averaged over the sequences of the batch.
pub fn rank_profile(embedded: &Tensor, traces: &[LayerTrace]) -> Result<RankProfile> {
    let first = traces
        .first()
        .ok_or_else(|| MgtError::Contract("rank profile needs at least one layer trace".into()))?;
    let (batch, seq) = (first.batch, first.seq);
    let mut ranks = Vec::with_capacity(traces.len() + 1);
    ranks.push(batch_mean_rank(embedded, batch, seq)?);
    for t in traces {
        ranks.push(batch_mean_rank(&t.hidden_state, t.batch, t.seq)?);
    }
    RankProfile::from_ranks(ranks)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerBetaStats {
    pub layer: usize,
    pub mean: f64,
    pub variance: f64,
    /// Fraction of entries strictly below zero.
    pub negative_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaStats {
    pub layers: Vec<LayerBetaStats>,
}

pub fn beta_moments(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let negative = values.iter().filter(|&&v| v < 0.0).count() as f64 / n;
    (mean, variance, negative)
}

/// Mean, population variance and negative fraction of β per layer.
pub fn beta_stats(traces: &[LayerTrace]) -> Result<BetaStats> {
    let layers = traces
        .iter()
        .map(|t| {
            let beta = t.beta_values.as_ref().ok_or_else(|| {
                MgtError::InvalidConfig("variant has no DDL gate; no β to summarize".into())
            })?;
            let (mean, variance, negative_fraction) = beta_moments(beta.data());
            Ok(LayerBetaStats {
                layer: t.layer_index,
                mean,
                variance,
                negative_fraction,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BetaStats { layers })
}

/// MGT gain minus the sum of the single-component gains.
pub fn synergy_coefficient(loss_base: f64, loss_mhc: f64, loss_ddl: f64, loss_mgt: f64) -> f64 {
    (loss_base - loss_mgt) - (loss_base - loss_mhc) - (loss_base - loss_ddl)
}

/// Fraction of masked rows whose argmax matches the target.
pub fn copy_accuracy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let (n, vocab) = logits.dims2()?;
    if targets.len() != n || mask.len() != n {
        return Err(MgtError::Dimension {
            op: "copy_accuracy",
            left: logits.shape().to_vec(),
            right: vec![targets.len(), mask.len()],
        });
    }
    let mut hits = 0usize;
    let mut count = 0usize;
    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        count += 1;
        let row = &logits.data()[r * vocab..(r + 1) * vocab];
        let argmax = row
            .iter()
            .enumerate()
            .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
        hits += usize::from(argmax == t);
    }
    if count == 0 {
        return Err(MgtError::InvalidConfig(
            "accuracy mask selects no positions".into(),
        ));
    }
    Ok(hits as f64 / count as f64)
}
