//! Batching, AdamW training loop, validation and checkpointing.

mod checkpoint;
mod optim;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointError, TensorEntry, FORMAT_VERSION, MAGIC};
pub use optim::{adamw_step, lr_schedule, OptimizerState};

use crate::corpus::CorpusSplits;
use crate::model::{init_model, loss, BoundParams, ModelConfig, ModelError, ModelParams, SeqBatch};
use crate::numerics::{Array, Graph};
use crate::tokenizer::{TokenSeq, Tokenizer, TrainingExample};

/// Share of the training pairs held out for dev loss when validation is on.
pub const DEV_FRACTION: f64 = 0.05;

const DEV_STREAM: u64 = 1 << 40;
const DROPOUT_STREAM: u64 = 1 << 41;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub grad_accum_steps: usize,
    pub warmup_steps: u64,
    pub seed: u64,
    /// Dev-loss interval in optimizer steps; 0 disables validation and the
    /// dev carve-out.
    pub validate_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_steps: 2000,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            grad_accum_steps: 1,
            warmup_steps: 200,
            seed: 0,
            validate_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.grad_accum_steps == 0 {
            return bad("grad_accum_steps must be at least 1");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_epsilon must be positive and weight_decay non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f32,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevRecord {
    pub step: u64,
    pub loss: f32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub dev: Vec<DevRecord>,
}

/// The wall-clock-free part of a [`TrainLog`] stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LogSummary {
    pub seed: u64,
    pub steps: u64,
    pub losses: Vec<f32>,
    pub dev: Vec<DevRecord>,
    pub n_train_examples: usize,
    pub n_dev_examples: usize,
}

impl TrainLog {
    /// One `{step, loss, lr, wall_ms}` JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.steps
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

/// Means over consecutive non-overlapping windows; a trailing partial window
/// is dropped.
pub fn window_means(losses: &[f32], window: usize) -> Vec<f64> {
    losses
        .chunks_exact(window)
        .map(|c| c.iter().map(|&x| x as f64).sum::<f64>() / window as f64)
        .collect()
}

/// Example indices per batch: a shuffle keyed by `(seed, epoch)` cut into
/// `batch_size` chunks, the last one possibly short.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn trimmed(seq: &TokenSeq, len: usize) -> TokenSeq {
    TokenSeq {
        ids: seq.ids[..len].to_vec(),
        mask: seq.mask[..len].to_vec(),
    }
}

/// Stacks examples into one batch, cutting trailing columns that are padding
/// in every row.
pub fn stack(examples: &[&TrainingExample]) -> Result<SeqBatch, ModelError> {
    let src = examples.iter().map(|e| e.input.real_len()).max().unwrap_or(0).max(1);
    let tgt = examples.iter().map(|e| e.labels.real_len()).max().unwrap_or(0).max(1);
    let rows: Vec<(TokenSeq, TokenSeq)> = examples
        .iter()
        .map(|e| (trimmed(&e.input, src), trimmed(&e.labels, tgt)))
        .collect();
    SeqBatch::from_pairs(rows.iter().map(|(a, b)| (a, b)))
}

pub fn make_batches(
    examples: &[TrainingExample],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<SeqBatch>, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    batch_order(examples.len(), batch_size, seed, epoch)
        .into_iter()
        .map(|ids| Ok(stack(&ids.iter().map(|&i| &examples[i]).collect::<Vec<_>>())?))
        .collect()
}

/// Deterministic `(train, dev)` split of the training examples.
pub fn dev_carve_out(examples: Vec<TrainingExample>, seed: u64) -> (Vec<TrainingExample>, Vec<TrainingExample>) {
    let n = examples.len();
    if n < 2 {
        return (examples, Vec::new());
    }
    let n_dev = ((n as f64 * DEV_FRACTION).round() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DEV_STREAM);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let mut is_dev = vec![false; n];
    idx[..n_dev].iter().for_each(|&i| is_dev[i] = true);
    let (mut train, mut dev) = (Vec::new(), Vec::new());
    for (e, d) in examples.into_iter().zip(is_dev) {
        if d { dev.push(e) } else { train.push(e) }
    }
    (train, dev)
}

fn batch_loss(params: &ModelParams<f32>, cfg: &ModelConfig, batch: &SeqBatch) -> Result<f32, ModelError> {
    let mut g = Graph::new();
    let p = BoundParams::bind(&mut g, params);
    let l = loss(&mut g, &p, cfg, batch, None)?;
    Ok(g.value(l).item())
}

/// Label-token-weighted mean loss over `examples`.
pub fn mean_loss(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    examples: &[TrainingExample],
    batch_size: usize,
) -> Result<f32, ModelError> {
    let (mut total, mut count) = (0.0f64, 0usize);
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = stack(&chunk.iter().collect::<Vec<_>>())?;
        let n = chunk.iter().map(|e| e.labels.real_len()).sum::<usize>();
        total += batch_loss(params, cfg, &batch)? as f64 * n as f64;
        count += n;
    }
    Ok((total / count.max(1) as f64) as f32)
}

/// Trains from scratch on `splits.train`.
pub fn train(
    splits: &CorpusSplits,
    tok: &Tokenizer,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<(Checkpoint, TrainLog), TrainError> {
    train_with_observer(splits, tok, mcfg, tcfg, |_| {})
}

/// [`train`] with a callback after every optimizer step.
pub fn train_with_observer(
    splits: &CorpusSplits,
    tok: &Tokenizer,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    mut observer: impl FnMut(&StepRecord),
) -> Result<(Checkpoint, TrainLog), TrainError> {
    mcfg.validate()?;
    tcfg.validate()?;
    if tok.vocab_size() != mcfg.vocab_size {
        return Err(TrainError::Config(format!(
            "tokenizer has {} tokens, model expects {}",
            tok.vocab_size(),
            mcfg.vocab_size
        )));
    }
    if splits.train.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let ecfg = mcfg.example_config();
    let examples: Vec<TrainingExample> = splits.train.iter().map(|p| tok.make_example(p, &ecfg)).collect();
    let (examples, dev) = if tcfg.validate_every > 0 {
        dev_carve_out(examples, tcfg.seed)
    } else {
        (examples, Vec::new())
    };

    let mut params = init_model(mcfg, tcfg.seed)?;
    let mut state = OptimizerState::new(&params);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    dropout_rng.set_stream(DROPOUT_STREAM);
    let mut log = TrainLog {
        seed: tcfg.seed,
        ..Default::default()
    };
    let start = Instant::now();
    let accum = tcfg.grad_accum_steps;
    let mut epoch = 0u64;
    let mut queue = make_batches(&examples, tcfg.batch_size, tcfg.seed, epoch)?.into_iter();

    for step in 1..=tcfg.max_steps {
        let mut grads: Option<std::collections::BTreeMap<String, Array<f32>>> = None;
        let mut step_loss = 0.0f64;
        for _ in 0..accum {
            let batch = match queue.next() {
                Some(b) => b,
                None => {
                    epoch += 1;
                    queue = make_batches(&examples, tcfg.batch_size, tcfg.seed, epoch)?.into_iter();
                    queue.next().expect("non-empty epoch")
                }
            };
            let mut g = Graph::new();
            let p = BoundParams::bind(&mut g, &params);
            let l = loss(&mut g, &p, mcfg, &batch, Some(&mut dropout_rng))?;
            let value = g.value(l).item();
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss(step));
            }
            step_loss += value as f64;
            let gr = g.backward(l).map_err(ModelError::from)?.into_params();
            match grads.as_mut() {
                None => grads = Some(gr),
                Some(acc) => {
                    for (name, a) in acc.iter_mut() {
                        for (x, y) in a.data_mut().iter_mut().zip(gr[name].data()) {
                            *x += *y;
                        }
                    }
                }
            }
        }
        let mut grads = grads.expect("at least one micro-batch");
        if accum > 1 {
            let s = 1.0 / accum as f32;
            grads.values_mut().for_each(|a| a.data_mut().iter_mut().for_each(|x| *x *= s));
        }
        let lr = lr_schedule(step, tcfg);
        adamw_step(&mut params, &grads, &mut state, tcfg, lr)?;
        let record = StepRecord {
            step,
            loss: (step_loss / accum as f64) as f32,
            lr,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        observer(&record);
        log.steps.push(record);
        if tcfg.validate_every > 0 && step % tcfg.validate_every == 0 && !dev.is_empty() {
            let dev_loss = mean_loss(&params, mcfg, &dev, tcfg.batch_size)?;
            log.dev.push(DevRecord { step, loss: dev_loss });
        }
    }

    let summary = LogSummary {
        seed: tcfg.seed,
        steps: tcfg.max_steps,
        losses: log.steps.iter().map(|r| r.loss).collect(),
        dev: log.dev.clone(),
        n_train_examples: examples.len(),
        n_dev_examples: dev.len(),
    };
    let ckpt = Checkpoint {
        model_config: mcfg.clone(),
        train_config: tcfg.clone(),
        tokenizer: tok.clone(),
        params,
        log: summary,
        manifest_digest: splits.digest(),
        headwords: splits.headwords.clone(),
    };
    Ok((ckpt, log))
}
