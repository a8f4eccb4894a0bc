//! Multi-run protocols: rank scan, ablation, β checkpoints and the
//! parameter-matched depth sweep.
//!
//! Runs are independent and may execute on a worker pool; results come back
//! in job order, so output never depends on scheduling.

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{MgtError, Result};
use crate::metrics::BetaStats;
use crate::model::{ModelConfig, Variant};
use crate::report::{check_records, push_beta, run_records, MetricsRecord, RecordSink};
use crate::train::{train_run, train_run_with, RunResult, TaskData};

/// Environment variable capping the number of concurrent runs.
pub const WORKERS_ENV: &str = "MGT_LAB_WORKERS";

/// Training checkpoints (percent of total steps) for β snapshots.
pub const BETA_CHECKPOINTS: [usize; 4] = [0, 25, 50, 100];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutput {
    pub experiment: &'static str,
    pub runs: Vec<RunResult>,
    pub records: Vec<MetricsRecord>,
}

fn worker_count() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .map_or(available, |n| n.min(available.max(1)))
}

/// Runs `f` over `jobs` on a bounded pool, returning results in job order.
pub fn run_pool<J, T, F>(jobs: &[J], f: F) -> Result<Vec<T>>
where
    J: Sync,
    T: Send,
    F: Fn(&J) -> Result<T> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| MgtError::Io(format!("cannot start worker pool: {e}")))?;
    pool.install(|| jobs.par_iter().map(&f).collect())
}

fn finish(
    experiment: &'static str,
    runs: Vec<RunResult>,
    extra: Vec<MetricsRecord>,
) -> Result<ExperimentOutput> {
    let mut records: Vec<MetricsRecord> = runs
        .iter()
        .flat_map(|r| run_records(experiment, r))
        .collect();
    records.extend(extra);
    check_records(&records)?;
    Ok(ExperimentOutput {
        experiment,
        runs,
        records,
    })
}

fn variant_config(base: &ExperimentConfig, variant: Variant, depth: usize) -> ExperimentConfig {
    let mut c = base.clone();
    c.model.variant = variant;
    c.model.depth = depth;
    c
}

/// Single configuration, every seed.
pub fn run_train(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let runs = run_pool(&config.seeds, |&seed| train_run(config, seed))?;
    finish("train", runs, Vec::new())
}

/// Standard vs. MGT at every rank-scan depth and seed.
pub fn run_rank_experiment(base: &ExperimentConfig) -> Result<ExperimentOutput> {
    base.validate()?;
    if base.rank_depths.is_empty() {
        return Err(MgtError::InvalidConfig(
            "experiment.rank_depths must not be empty".into(),
        ));
    }
    let mut jobs = Vec::new();
    for &depth in &base.rank_depths {
        for variant in [Variant::Standard, Variant::MgtFull] {
            for &seed in &base.seeds {
                jobs.push((variant_config(base, variant, depth), seed));
            }
        }
    }
    let runs = run_pool(&jobs, |(c, seed)| train_run(c, *seed))?;
    finish("rank-scan", runs, Vec::new())
}

/// All four variants at the ablation depth, paired by seed.
pub fn run_ablation(base: &ExperimentConfig) -> Result<ExperimentOutput> {
    base.validate()?;
    let mut jobs = Vec::new();
    for variant in Variant::ALL {
        for &seed in &base.seeds {
            jobs.push((variant_config(base, variant, base.ablation_depth), seed));
        }
    }
    let runs = run_pool(&jobs, |(c, seed)| train_run(c, *seed))?;
    finish("ablate", runs, Vec::new())
}

/// Step at which a percent checkpoint is taken.
pub fn checkpoint_step(total_steps: usize, percent: usize) -> usize {
    total_steps * percent / 100
}

/// Deep MGT with β snapshots at 0/25/50/100% of training.
pub fn run_beta_analysis(base: &ExperimentConfig) -> Result<ExperimentOutput> {
    base.validate()?;
    let config = variant_config(base, Variant::MgtFull, base.beta_depth);
    let total = config.total_steps;
    let results = run_pool(&config.seeds, |&seed| {
        let mut snapshots: Vec<(usize, BetaStats)> = Vec::new();
        let run = train_run_with(&config, seed, |trainer| {
            for &p in &BETA_CHECKPOINTS[..BETA_CHECKPOINTS.len() - 1] {
                if checkpoint_step(total, p) == trainer.step() {
                    snapshots.push((p, trainer.probe_beta()?));
                }
            }
            Ok(())
        })?;
        Ok((run, snapshots))
    })?;
    let mut extra = Vec::new();
    let mut runs = Vec::new();
    for (run, snapshots) in results {
        let mut sink = RecordSink::new("beta-stats", &run);
        for (p, stats) in &snapshots {
            for l in &stats.layers {
                push_beta(&mut sink, *p, l);
            }
        }
        extra.extend(sink.records);
        runs.push(run);
    }
    finish("beta-stats", runs, extra)
}

/// Closed-form parameter count of a model configuration.
pub fn count_parameters(model: &ModelConfig) -> usize {
    let d = model.width;
    let hidden = model.ffn_mult * d;
    let attention = 4 * d * d + 2 * d;
    let ffn = 2 * d * hidden + hidden + d + 2 * d;
    let mut per_block_extra = 0;
    if model.variant.has_mhc() {
        per_block_extra += d * d + 2 * d;
    }
    if model.variant.has_ddl() {
        per_block_extra += d * d + d + 1;
    }
    let per_pair = attention + ffn + 2 * per_block_extra;
    (model.vocab + model.seq_len) * d + 2 * d + model.depth * per_pair
}

/// Width (a multiple of the head count) whose parameter count is nearest
/// to `budget`; errors if no width lands within 10% of it.
pub fn solve_width(model: &ModelConfig, budget: usize) -> Result<(usize, usize)> {
    let h = model.heads;
    let count_at = |width: usize| {
        let mut m = model.clone();
        m.width = width;
        count_parameters(&m)
    };
    if count_at(h) as f64 > 1.1 * budget as f64 {
        return Err(MgtError::InvalidConfig(format!(
            "no feasible width: depth {} exceeds the parameter budget {budget} even at width {h}",
            model.depth
        )));
    }
    let mut best = (h, count_at(h));
    let mut width = h;
    loop {
        width += h;
        let count = count_at(width);
        if count.abs_diff(budget) < best.1.abs_diff(budget) {
            best = (width, count);
        }
        if count > budget {
            break;
        }
    }
    if best.1.abs_diff(budget) as f64 > 0.1 * budget as f64 {
        return Err(MgtError::InvalidConfig(format!(
            "closest width {} gives {} parameters, more than 10% from {budget}",
            best.0, best.1
        )));
    }
    Ok(best)
}

/// Standard vs. MGT at fixed parameter budget across depths.
pub fn run_depth_scaling(base: &ExperimentConfig) -> Result<ExperimentOutput> {
    base.validate()?;
    let (_, vocab) = TaskData::from_config(base)?;
    let mut jobs = Vec::new();
    for &depth in &base.scale_depths {
        for variant in [Variant::Standard, Variant::MgtFull] {
            let mut c = variant_config(base, variant, depth);
            c.model.vocab = vocab;
            let (width, count) = solve_width(&c.model, base.param_budget)?;
            c.model.width = width;
            for &seed in &base.seeds {
                jobs.push((c.clone(), seed, count));
            }
        }
    }
    let results = run_pool(&jobs, |(c, seed, count)| {
        Ok((train_run(c, *seed)?, c.model.width, *count))
    })?;
    let mut extra = Vec::new();
    let mut runs = Vec::new();
    for (run, width, count) in results {
        let mut sink = RecordSink::new("depth-scale", &run);
        sink.push(0, "width", width as f64);
        sink.push(0, "param_count", count as f64);
        sink.push(0, "target_loss", base.target_loss);
        if let Some(step) = run.steps_to_target(base.target_loss) {
            sink.push(0, "steps_to_target", step as f64);
        }
        extra.extend(sink.records);
        runs.push(run);
    }
    finish("depth-scale", runs, extra)
}
