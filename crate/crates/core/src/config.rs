//! Declarative experiment configuration and its flat `key=value` encoding.
//!
//! Every field is addressed by a dotted key. [`ExperimentConfig::echo`]
//! writes every key in [`KEYS`] order, and parsing that text back yields the
//! identical configuration, so an echo fully determines a run.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::CopyTask;
use crate::error::{MgtError, Result};
use crate::model::{ModelConfig, Variant};
use crate::optim::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    CharLm,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Copy => "copy",
            Self::CharLm => "char_lm",
        }
    }
}

impl FromStr for TaskKind {
    type Err = MgtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "char_lm" => Ok(Self::CharLm),
            _ => Err(MgtError::InvalidConfig(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub task: TaskKind,
    /// Copy task: number of symbols to copy.
    pub half_len: usize,
    /// Character task: path of a UTF-8 text file.
    pub corpus: Option<PathBuf>,
    pub optim: AdamConfig,
    pub batch_size: usize,
    pub total_steps: usize,
    pub eval_every: usize,
    /// Number of fixed validation batches per evaluation.
    pub eval_batches: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Depths compared by the rank scan.
    pub rank_depths: Vec<usize>,
    pub ablation_depth: usize,
    pub beta_depth: usize,
    pub scale_depths: Vec<usize>,
    /// Parameter budget of the depth-scaling sweep.
    pub param_budget: usize,
    /// Validation loss that counts as "converged" in the depth sweep.
    pub target_loss: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            task: TaskKind::Copy,
            half_len: 8,
            corpus: None,
            optim: AdamConfig::default(),
            batch_size: 16,
            total_steps: 5000,
            eval_every: 250,
            eval_batches: 4,
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("out"),
            rank_depths: vec![4, 8, 16, 24],
            ablation_depth: 8,
            beta_depth: 16,
            scale_depths: vec![4, 8, 16],
            param_budget: 500_000,
            target_loss: 0.5,
        }
    }
}

/// Every accepted key with a one-line description, in echo order.
pub const KEYS: &[(&str, &str)] = &[
    ("model.depth", "number of attention+FFN layer pairs"),
    ("model.width", "hidden width D"),
    ("model.heads", "attention heads (must divide width)"),
    ("model.ffn_mult", "FFN hidden size as a multiple of width"),
    (
        "model.vocab",
        "vocabulary size (copy task; char_lm derives it from the corpus)",
    ),
    ("model.seq_len", "maximum sequence length"),
    ("model.variant", "standard | mhc_only | ddl_only | mgt_full"),
    ("model.lambda", "DDL gate range scale"),
    ("model.epsilon", "DDL gate offset"),
    ("model.alpha_init", "initial erasure strength"),
    ("task.kind", "copy | char_lm"),
    ("task.half_len", "copy task: symbols per half"),
    (
        "task.corpus",
        "char_lm: path to a UTF-8 text file (empty for none)",
    ),
    ("optim.learning_rate", "Adam step size"),
    ("optim.beta1", "Adam first-moment decay"),
    ("optim.beta2", "Adam second-moment decay"),
    ("optim.eps", "Adam denominator stabilizer"),
    ("optim.grad_clip", "global gradient-norm clip, or none"),
    ("train.batch_size", "sequences per step"),
    ("train.total_steps", "optimizer steps per run"),
    ("train.eval_every", "steps between evaluations"),
    ("train.eval_batches", "validation batches per evaluation"),
    ("train.seeds", "comma-separated run seeds"),
    ("experiment.rank_depths", "rank-scan depths"),
    ("experiment.ablation_depth", "ablation depth"),
    ("experiment.beta_depth", "beta-stats depth"),
    ("experiment.scale_depths", "depth-scale depths"),
    ("experiment.param_budget", "depth-scale parameter budget"),
    (
        "experiment.target_loss",
        "depth-scale convergence target (validation loss)",
    ),
    ("output_dir", "directory receiving all output files"),
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| MgtError::InvalidConfig(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let value = value.trim();
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v)).collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    /// Sets one dotted key; the error names the key on any failure.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "model.depth" => self.model.depth = parse_value(key, value)?,
            "model.width" => self.model.width = parse_value(key, value)?,
            "model.heads" => self.model.heads = parse_value(key, value)?,
            "model.ffn_mult" => self.model.ffn_mult = parse_value(key, value)?,
            "model.vocab" => self.model.vocab = parse_value(key, value)?,
            "model.seq_len" => self.model.seq_len = parse_value(key, value)?,
            "model.variant" => {
                self.model.variant = value
                    .parse::<Variant>()
                    .map_err(|e| MgtError::InvalidConfig(format!("{key}: {e}")))?
            }
            "model.lambda" => self.model.lambda = parse_value(key, value)?,
            "model.epsilon" => self.model.epsilon = parse_value(key, value)?,
            "model.alpha_init" => self.model.alpha_init = parse_value(key, value)?,
            "task.kind" => {
                self.task = value
                    .parse()
                    .map_err(|e| MgtError::InvalidConfig(format!("{key}: {e}")))?
            }
            "task.half_len" => self.half_len = parse_value(key, value)?,
            "task.corpus" => {
                self.corpus = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            "optim.learning_rate" => self.optim.learning_rate = parse_value(key, value)?,
            "optim.beta1" => self.optim.beta1 = parse_value(key, value)?,
            "optim.beta2" => self.optim.beta2 = parse_value(key, value)?,
            "optim.eps" => self.optim.eps = parse_value(key, value)?,
            "optim.grad_clip" => {
                self.optim.grad_clip = match value {
                    "none" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "train.batch_size" => self.batch_size = parse_value(key, value)?,
            "train.total_steps" => self.total_steps = parse_value(key, value)?,
            "train.eval_every" => self.eval_every = parse_value(key, value)?,
            "train.eval_batches" => self.eval_batches = parse_value(key, value)?,
            "train.seeds" => self.seeds = parse_list(key, value)?,
            "experiment.rank_depths" => self.rank_depths = parse_list(key, value)?,
            "experiment.ablation_depth" => self.ablation_depth = parse_value(key, value)?,
            "experiment.beta_depth" => self.beta_depth = parse_value(key, value)?,
            "experiment.scale_depths" => self.scale_depths = parse_list(key, value)?,
            "experiment.param_budget" => self.param_budget = parse_value(key, value)?,
            "experiment.target_loss" => self.target_loss = parse_value(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(MgtError::InvalidConfig(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Canonical text form of one key.
    pub fn get(&self, key: &str) -> Result<String> {
        let m = &self.model;
        Ok(match key {
            "model.depth" => m.depth.to_string(),
            "model.width" => m.width.to_string(),
            "model.heads" => m.heads.to_string(),
            "model.ffn_mult" => m.ffn_mult.to_string(),
            "model.vocab" => m.vocab.to_string(),
            "model.seq_len" => m.seq_len.to_string(),
            "model.variant" => m.variant.name().to_string(),
            "model.lambda" => m.lambda.to_string(),
            "model.epsilon" => m.epsilon.to_string(),
            "model.alpha_init" => m.alpha_init.to_string(),
            "task.kind" => self.task.name().to_string(),
            "task.half_len" => self.half_len.to_string(),
            "task.corpus" => self
                .corpus
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "optim.learning_rate" => self.optim.learning_rate.to_string(),
            "optim.beta1" => self.optim.beta1.to_string(),
            "optim.beta2" => self.optim.beta2.to_string(),
            "optim.eps" => self.optim.eps.to_string(),
            "optim.grad_clip" => self
                .optim
                .grad_clip
                .map_or_else(|| "none".to_string(), |c| c.to_string()),
            "train.batch_size" => self.batch_size.to_string(),
            "train.total_steps" => self.total_steps.to_string(),
            "train.eval_every" => self.eval_every.to_string(),
            "train.eval_batches" => self.eval_batches.to_string(),
            "train.seeds" => join(&self.seeds),
            "experiment.rank_depths" => join(&self.rank_depths),
            "experiment.ablation_depth" => self.ablation_depth.to_string(),
            "experiment.beta_depth" => self.beta_depth.to_string(),
            "experiment.scale_depths" => join(&self.scale_depths),
            "experiment.param_budget" => self.param_budget.to_string(),
            "experiment.target_loss" => self.target_loss.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            _ => return Err(MgtError::InvalidConfig(format!("unknown key {key:?}"))),
        })
    }

    /// All keys as `key=value` lines.
    pub fn echo(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k}={}\n", self.get(k).expect("every listed key is known")))
            .collect()
    }

    /// Echo without the output directory; identifies a run's semantics.
    pub fn canonical(&self) -> String {
        KEYS.iter()
            .filter(|(k, _)| *k != "output_dir")
            .map(|(k, _)| format!("{k}={}\n", self.get(k).expect("every listed key is known")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim
            .validate()
            .map_err(|e| MgtError::InvalidConfig(format!("optim: {e}")))?;
        if self.seeds.is_empty() {
            return Err(MgtError::InvalidConfig(
                "train.seeds must not be empty".into(),
            ));
        }
        if self.eval_every == 0 {
            return Err(MgtError::InvalidConfig(
                "train.eval_every must be >= 1".into(),
            ));
        }
        if self.total_steps > 0 && self.total_steps < self.eval_every {
            return Err(MgtError::InvalidConfig(
                "train.total_steps must be >= train.eval_every".into(),
            ));
        }
        if self.batch_size == 0 || self.eval_batches == 0 {
            return Err(MgtError::InvalidConfig(
                "train.batch_size and train.eval_batches must be >= 1".into(),
            ));
        }
        match self.task {
            TaskKind::Copy => {
                CopyTask::new(self.model.vocab, self.half_len, self.model.seq_len)?;
            }
            TaskKind::CharLm => {
                if self.corpus.is_none() {
                    return Err(MgtError::InvalidConfig(
                        "task.corpus is required for char_lm".into(),
                    ));
                }
                if self.model.seq_len < 2 {
                    return Err(MgtError::InvalidConfig("model.seq_len must be >= 2".into()));
                }
            }
        }
        if !(self.target_loss.is_finite()) {
            return Err(MgtError::InvalidConfig(
                "experiment.target_loss must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Copy of this config for a single seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seeds = vec![seed];
        c.model.seed = seed;
        c
    }
}
