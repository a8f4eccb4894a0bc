//! Single training runs: batching, the optimization loop, evaluation and
//! final-model probing.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tape;
use crate::config::{ExperimentConfig, TaskKind};
use crate::data::{load_char_corpus, stream_rng, Batch, CharCorpus, CopyTask};
use crate::error::{MgtError, Result};
use crate::metrics::{beta_stats, copy_accuracy, rank_profile, BetaStats, RankProfile};
use crate::model::{Model, Variant};
use crate::optim::{adam_step, AdamState};

/// Seed of the fixed probe batch used for trace capture.
pub const PROBE_SEED: u64 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// Mean training loss since the previous record (step 0: loss of the
    /// first training batch at initialization).
    pub train_loss: f64,
    pub val_loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config_hash: String,
    pub seed: u64,
    pub variant: Variant,
    pub depth: usize,
    pub records: Vec<EvalRecord>,
    /// Rank profile of the final model on the probe batch.
    pub rank: Option<RankProfile>,
    /// β statistics of the final model on the probe batch (DDL variants).
    pub beta: Option<BetaStats>,
    pub wall_seconds: f64,
    /// SHA-256 over every training batch consumed, in order.
    pub batch_digest: String,
    /// Set when the run stopped early on a numerical failure.
    pub aborted: Option<String>,
}

impl RunResult {
    pub fn final_record(&self) -> Option<&EvalRecord> {
        self.records.last()
    }

    /// First evaluated step whose validation loss is at or below `target`.
    pub fn steps_to_target(&self, target: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.val_loss <= target)
            .map(|r| r.step)
    }
}

/// Short hex digest of a configuration's canonical text.
pub fn config_hash(config: &ExperimentConfig) -> String {
    hex(&Sha256::digest(config.canonical().as_bytes())[..8])
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug)]
pub enum TaskData {
    Copy(CopyTask),
    Char(CharCorpus),
}

impl TaskData {
    /// Builds the task and returns it with the vocabulary size the model needs.
    pub fn from_config(config: &ExperimentConfig) -> Result<(Self, usize)> {
        match config.task {
            TaskKind::Copy => {
                let task =
                    CopyTask::new(config.model.vocab, config.half_len, config.model.seq_len)?;
                Ok((Self::Copy(task), config.model.vocab))
            }
            TaskKind::CharLm => {
                let path = config.corpus.as_ref().ok_or_else(|| {
                    MgtError::InvalidConfig("task.corpus is required for char_lm".into())
                })?;
                let corpus = load_char_corpus(path)?;
                let vocab = corpus.vocab_size();
                Ok((Self::Char(corpus), vocab))
            }
        }
    }

    /// Training batch for a step; depends only on (seed, step).
    pub fn train_batch(&self, batch: usize, seq: usize, seed: u64, step: usize) -> Result<Batch> {
        let mut rng = stream_rng("train", &[seed, step as u64]);
        match self {
            Self::Copy(task) => Ok(task.batch_from_rng(batch, &mut rng)),
            Self::Char(corpus) => corpus.train_batch(batch, seq, &mut rng),
        }
    }

    /// Held-out batch `index`; independent of the run seed.
    pub fn val_batch(&self, batch: usize, seq: usize, index: usize) -> Result<Batch> {
        match self {
            Self::Copy(task) => {
                Ok(task.batch_from_rng(batch, &mut stream_rng("val", &[index as u64])))
            }
            Self::Char(corpus) => corpus.val_batch(index, batch, seq),
        }
    }

    pub fn probe_batch(&self, batch: usize, seq: usize) -> Result<Batch> {
        match self {
            Self::Copy(task) => {
                Ok(task.batch_from_rng(batch, &mut stream_rng("probe", &[PROBE_SEED])))
            }
            Self::Char(corpus) => corpus.val_batch(PROBE_SEED as usize, batch, seq),
        }
    }
}

/// Loss and accuracy of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchScore {
    pub loss: f64,
    pub accuracy: f64,
}

/// Owns a model, its optimizer state and the task data for one seed.
pub struct Trainer {
    config: ExperimentConfig,
    seed: u64,
    model: Model,
    state: AdamState,
    data: TaskData,
    step: usize,
    batches: Sha256,
}

impl Trainer {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut config = config.with_seed(seed);
        let (data, vocab) = TaskData::from_config(&config)?;
        config.model.vocab = vocab;
        let model = Model::new(config.model.clone())?;
        Ok(Self {
            config,
            seed,
            model,
            state: AdamState::default(),
            data,
            step: 0,
            batches: Sha256::new(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Hex digest of the training batches consumed so far.
    pub fn batch_digest(&self) -> String {
        hex(&self.batches.clone().finalize())
    }

    fn seq_len(&self) -> usize {
        match &self.data {
            TaskData::Copy(task) => task.seq_len(),
            TaskData::Char(_) => self.config.model.seq_len,
        }
    }

    fn score(&self, batch: &Batch) -> Result<BatchScore> {
        let mut tape = Tape::new();
        let pass = self
            .model
            .forward(&mut tape, &batch.tokens, batch.batch, false)?;
        let (targets, mask) = batch.shifted_targets();
        let loss = tape.softmax_cross_entropy(pass.logits, &targets, &mask)?;
        Ok(BatchScore {
            loss: tape.value(loss).data()[0],
            accuracy: copy_accuracy(tape.value(pass.logits), &targets, &mask)?,
        })
    }

    /// Loss of the batch the next step would train on, without updating.
    pub fn peek_train_loss(&self) -> Result<f64> {
        let batch =
            self.data
                .train_batch(self.config.batch_size, self.seq_len(), self.seed, self.step)?;
        Ok(self.score(&batch)?.loss)
    }

    /// One optimizer step; returns the training loss before the update.
    pub fn train_step(&mut self) -> Result<f64> {
        let batch =
            self.data
                .train_batch(self.config.batch_size, self.seq_len(), self.seed, self.step)?;
        for &t in &batch.tokens {
            self.batches.update((t as u64).to_le_bytes());
        }
        let mut tape = Tape::new();
        let pass = self
            .model
            .forward(&mut tape, &batch.tokens, batch.batch, false)?;
        let (targets, mask) = batch.shifted_targets();
        let loss = tape.softmax_cross_entropy(pass.logits, &targets, &mask)?;
        let loss_value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss)?;
        let mut named = BTreeMap::new();
        for (name, &var) in pass.bound.iter() {
            if let Some(g) = grads.take(var) {
                named.insert(name.clone(), g);
            }
        }
        adam_step(
            self.model.params_mut(),
            &named,
            &mut self.state,
            &self.config.optim,
        )?;
        self.step += 1;
        Ok(loss_value)
    }

    /// Mean loss and accuracy over the fixed validation batches.
    pub fn evaluate(&self) -> Result<BatchScore> {
        let n = self.config.eval_batches;
        let (mut loss, mut accuracy) = (0.0, 0.0);
        for i in 0..n {
            let s = self.score(&self.data.val_batch(
                self.config.batch_size,
                self.seq_len(),
                i,
            )?)?;
            loss += s.loss;
            accuracy += s.accuracy;
        }
        Ok(BatchScore {
            loss: loss / n as f64,
            accuracy: accuracy / n as f64,
        })
    }

    /// Rank profile and β statistics of the current model on the probe batch.
    pub fn probe(&self) -> Result<(RankProfile, Option<BetaStats>)> {
        let batch = self
            .data
            .probe_batch(self.config.batch_size, self.seq_len())?;
        let mut tape = Tape::new();
        let pass = self
            .model
            .forward(&mut tape, &batch.tokens, batch.batch, true)?;
        let rank = rank_profile(tape.value(pass.embedded), &pass.traces)?;
        let beta = if self.config.model.variant.has_ddl() {
            Some(beta_stats(&pass.traces)?)
        } else {
            None
        };
        Ok((rank, beta))
    }

    /// β statistics only, as used by checkpoint snapshots.
    pub fn probe_beta(&self) -> Result<BetaStats> {
        let batch = self
            .data
            .probe_batch(self.config.batch_size, self.seq_len())?;
        let mut tape = Tape::new();
        let pass = self
            .model
            .forward(&mut tape, &batch.tokens, batch.batch, true)?;
        beta_stats(&pass.traces)
    }
}

fn is_numerical(err: &MgtError) -> bool {
    matches!(
        err,
        MgtError::Instability { .. } | MgtError::NonFiniteGradient { .. }
    )
}

/// Trains one seed; `on_step` runs after every optimizer step (and once at
/// step 0) with the trainer in its post-step state.
pub fn train_run_with<F>(config: &ExperimentConfig, seed: u64, mut on_step: F) -> Result<RunResult>
where
    F: FnMut(&Trainer) -> Result<()>,
{
    let started = Instant::now();
    let mut trainer = Trainer::new(config, seed)?;
    let mut result = RunResult {
        config_hash: config_hash(trainer.config()),
        seed,
        variant: trainer.config().model.variant,
        depth: trainer.config().model.depth,
        records: Vec::new(),
        rank: None,
        beta: None,
        wall_seconds: 0.0,
        batch_digest: String::new(),
        aborted: None,
    };
    let outcome = run_loop(&mut trainer, &mut result, &mut on_step);
    result.wall_seconds = started.elapsed().as_secs_f64();
    result.batch_digest = trainer.batch_digest();
    match outcome {
        Ok(()) => Ok(result),
        Err(e) if is_numerical(&e) => {
            result.aborted = Some(format!("step {}: {e}", trainer.step()));
            Ok(result)
        }
        Err(e) => Err(e),
    }
}

fn run_loop<F>(trainer: &mut Trainer, result: &mut RunResult, on_step: &mut F) -> Result<()>
where
    F: FnMut(&Trainer) -> Result<()>,
{
    let total = trainer.config().total_steps;
    let every = trainer.config().eval_every;
    let initial = trainer.evaluate()?;
    result.records.push(EvalRecord {
        step: 0,
        train_loss: trainer.peek_train_loss()?,
        val_loss: initial.loss,
        accuracy: initial.accuracy,
    });
    on_step(trainer)?;
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    for step in 1..=total {
        loss_sum += trainer.train_step()?;
        loss_count += 1;
        on_step(trainer)?;
        if step % every == 0 || step == total {
            let eval = trainer.evaluate()?;
            let record = EvalRecord {
                step,
                train_loss: loss_sum / loss_count as f64,
                val_loss: eval.loss,
                accuracy: eval.accuracy,
            };
            if ![record.train_loss, record.val_loss, record.accuracy]
                .iter()
                .all(|v| v.is_finite())
            {
                return Err(MgtError::Instability {
                    layer: usize::MAX,
                    detail: format!("non-finite evaluation at step {step}"),
                });
            }
            result.records.push(record);
            loss_sum = 0.0;
            loss_count = 0;
        }
    }
    let (rank, beta) = trainer.probe()?;
    result.rank = Some(rank);
    result.beta = beta;
    Ok(())
}

pub fn train_run(config: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    train_run_with(config, seed, |_| Ok(()))
}
