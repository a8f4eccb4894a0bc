//! Flat metric records and their deterministic per-experiment summary.
//!
//! Every number an experiment reports is a [`MetricsRecord`]; the summary is
//! computed from records alone, so re-aggregating records parsed back from
//! CSV reproduces it exactly.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{MgtError, Result};
use crate::metrics::{synergy_coefficient, LayerBetaStats};
use crate::model::Variant;
use crate::train::RunResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub experiment: String,
    pub variant: String,
    pub depth: usize,
    pub seed: u64,
    /// Step for training curves, layer for per-layer metrics, 0 otherwise.
    pub index: usize,
    pub metric: String,
    pub value: f64,
}

/// Builds records for one run; `push` appends one metric.
pub struct RecordSink<'a> {
    experiment: &'a str,
    run: &'a RunResult,
    pub records: Vec<MetricsRecord>,
}

impl<'a> RecordSink<'a> {
    pub fn new(experiment: &'a str, run: &'a RunResult) -> Self {
        Self {
            experiment,
            run,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, index: usize, metric: &str, value: f64) {
        self.records.push(MetricsRecord {
            run_id: self.run.config_hash.clone(),
            experiment: self.experiment.to_string(),
            variant: self.run.variant.name().to_string(),
            depth: self.run.depth,
            seed: self.run.seed,
            index,
            metric: metric.to_string(),
            value,
        });
    }
}

/// Pushes one layer's β statistics at a training checkpoint (percent).
pub fn push_beta(sink: &mut RecordSink<'_>, checkpoint: usize, stats: &LayerBetaStats) {
    sink.push(stats.layer, &format!("beta_mean@{checkpoint}"), stats.mean);
    sink.push(
        stats.layer,
        &format!("beta_var@{checkpoint}"),
        stats.variance,
    );
    sink.push(
        stats.layer,
        &format!("beta_neg_frac@{checkpoint}"),
        stats.negative_fraction,
    );
}

/// Standard records of a finished run: training curve, final losses, the
/// probe rank profile, β statistics (as the 100% checkpoint) and an abort
/// flag.
pub fn run_records(experiment: &str, run: &RunResult) -> Vec<MetricsRecord> {
    let mut sink = RecordSink::new(experiment, run);
    for r in &run.records {
        sink.push(r.step, "train_loss", r.train_loss);
        sink.push(r.step, "val_loss", r.val_loss);
        sink.push(r.step, "accuracy", r.accuracy);
    }
    if let Some(r) = run.final_record() {
        sink.push(0, "final_val_loss", r.val_loss);
        sink.push(0, "final_accuracy", r.accuracy);
    }
    if let Some(rank) = &run.rank {
        for (layer, &v) in rank.per_layer.iter().enumerate() {
            sink.push(layer, "rank_eff", v);
        }
        sink.push(0, "rank_preservation", rank.preservation_ratio);
        sink.push(0, "rank_decay_rate", rank.decay_rate);
    }
    if let Some(beta) = &run.beta {
        for l in &beta.layers {
            push_beta(&mut sink, 100, l);
        }
    }
    sink.push(0, "aborted", f64::from(u8::from(run.aborted.is_some())));
    sink.records
}

/// Rejects non-finite values and duplicate `(run_id, index, metric)` keys.
pub fn check_records(records: &[MetricsRecord]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in records {
        if !r.value.is_finite() {
            return Err(MgtError::Contract(format!(
                "non-finite {} for run {} at index {}",
                r.metric, r.run_id, r.index
            )));
        }
        if !seen.insert((r.run_id.as_str(), r.index, r.metric.as_str())) {
            return Err(MgtError::Contract(format!(
                "duplicate record ({}, {}, {})",
                r.run_id, r.index, r.metric
            )));
        }
    }
    Ok(())
}

/// Mean and sample standard deviation (`None` below two values).
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1).then(|| sample_variance(values).sqrt());
    (mean, std)
}

pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

type GroupKey = (String, usize, String, usize);

/// Values keyed by (variant, depth, metric, index), each list ordered by seed.
fn group(records: &[&MetricsRecord]) -> BTreeMap<GroupKey, Vec<f64>> {
    let mut by_seed: BTreeMap<(GroupKey, u64, String), f64> = BTreeMap::new();
    for r in records {
        let key = (r.variant.clone(), r.depth, r.metric.clone(), r.index);
        by_seed.insert((key, r.seed, r.run_id.clone()), r.value);
    }
    let mut groups: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
    for ((key, _, _), v) in by_seed {
        groups.entry(key).or_default().push(v);
    }
    groups
}

fn number(x: f64) -> Value {
    json!(x)
}

fn opt_number(x: Option<f64>) -> Value {
    x.map_or(Value::Null, number)
}

/// Per-experiment aggregates (mean ± sample std over seeds) plus derived
/// quantities. Runs flagged as aborted are listed and excluded.
pub fn summarize(experiment: &str, records: &[MetricsRecord]) -> Value {
    let aborted: BTreeSet<&str> = records
        .iter()
        .filter(|r| r.metric == "aborted" && r.value != 0.0)
        .map(|r| r.run_id.as_str())
        .collect();
    let kept: Vec<&MetricsRecord> = records
        .iter()
        .filter(|r| r.experiment == experiment && !aborted.contains(r.run_id.as_str()))
        .collect();
    let groups = group(&kept);
    let aggregates: Vec<Value> = groups
        .iter()
        .map(|((variant, depth, metric, index), values)| {
            let (mean, std) = mean_std(values);
            json!({
                "variant": variant,
                "depth": depth,
                "metric": metric,
                "index": index,
                "n": values.len(),
                "mean": number(mean),
                "std": opt_number(std),
            })
        })
        .collect();
    let lookup = |variant: &str, depth: usize, metric: &str| -> Option<&Vec<f64>> {
        groups.get(&(variant.to_string(), depth, metric.to_string(), 0))
    };
    let depths: BTreeSet<usize> = kept.iter().map(|r| r.depth).collect();
    let mut derived = Map::new();
    match experiment {
        "rank-scan" => {
            let mut per_depth = Vec::new();
            for &d in &depths {
                let rho =
                    |v: Variant| lookup(v.name(), d, "rank_preservation").map(|x| mean_std(x).0);
                per_depth.push(json!({
                    "depth": d,
                    "rho_standard": opt_number(rho(Variant::Standard)),
                    "rho_mgt": opt_number(rho(Variant::MgtFull)),
                }));
            }
            derived.insert("rho_by_depth".into(), Value::Array(per_depth));
            if let Some(&max_depth) = depths.iter().next_back() {
                let rho = |v: Variant| {
                    lookup(v.name(), max_depth, "rank_preservation").map(|x| mean_std(x).0)
                };
                let check = match (rho(Variant::Standard), rho(Variant::MgtFull)) {
                    (Some(s), Some(m)) => json!({
                        "depth": max_depth,
                        "rho_standard": s,
                        "rho_mgt": m,
                        "passed": m >= s,
                    }),
                    _ => Value::Null,
                };
                derived.insert("rho_check".into(), check);
            }
        }
        "ablate" => {
            let mut losses = Map::new();
            let mut means = BTreeMap::new();
            for v in Variant::ALL {
                for &d in &depths {
                    if let Some(x) = lookup(v.name(), d, "final_val_loss") {
                        let m = mean_std(x).0;
                        losses.insert(v.name().into(), number(m));
                        means.insert(v, m);
                    }
                }
            }
            derived.insert("mean_final_val_loss".into(), Value::Object(losses));
            let synergy = match (
                means.get(&Variant::Standard),
                means.get(&Variant::MhcOnly),
                means.get(&Variant::DdlOnly),
                means.get(&Variant::MgtFull),
            ) {
                (Some(&b), Some(&h), Some(&d), Some(&m)) => Some(synergy_coefficient(b, h, d, m)),
                _ => None,
            };
            derived.insert("synergy_coefficient".into(), opt_number(synergy));
            derived.insert(
                "synergy_sign".into(),
                match synergy {
                    Some(s) if s > 0.0 => json!("positive"),
                    Some(s) if s < 0.0 => json!("negative"),
                    Some(_) => json!("zero"),
                    None => Value::Null,
                },
            );
        }
        "depth-scale" => {
            let mut rows = Vec::new();
            for v in [Variant::Standard, Variant::MgtFull] {
                for &d in &depths {
                    let Some(finals) = lookup(v.name(), d, "final_val_loss") else {
                        continue;
                    };
                    let first = |metric: &str| lookup(v.name(), d, metric).map(|x| x[0]);
                    let reached = lookup(v.name(), d, "steps_to_target");
                    rows.push(json!({
                        "variant": v.name(),
                        "depth": d,
                        "width": opt_number(first("width")),
                        "param_count": opt_number(first("param_count")),
                        "final_val_loss_mean": number(mean_std(finals).0),
                        "final_val_loss_variance":
                            opt_number((finals.len() > 1).then(|| sample_variance(finals))),
                        "seeds_reaching_target": reached.map_or(0, Vec::len),
                        "steps_to_target_mean": opt_number(reached.map(|x| mean_std(x).0)),
                    }));
                }
            }
            derived.insert("by_variant_depth".into(), Value::Array(rows));
            let target = kept
                .iter()
                .find(|r| r.metric == "target_loss")
                .map(|r| r.value);
            derived.insert("target_loss".into(), opt_number(target));
            derived.insert(
                "target_provenance".into(),
                json!("experiment.target_loss, set from a pilot run"),
            );
        }
        _ => {}
    }
    json!({
        "experiment": experiment,
        "aborted_runs": aborted.iter().collect::<Vec<_>>(),
        "aggregates": aggregates,
        "derived": Value::Object(derived),
    })
}
