use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::graph::{logits_at, run};
use super::weights::ModelWeights;
use super::{ModelConfig, TransformerModel};
use crate::autodiff::Tape;
use crate::data::{TrainingSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::optim::{AdamW, OptimizerConfig};
use crate::rng::seeded;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Floor of the cosine decay.
    pub min_lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub log_every: usize,
}

impl Default for PretrainSchedule {
    fn default() -> Self {
        PretrainSchedule {
            steps: 1500,
            batch_size: 16,
            lr: 5e-3,
            min_lr: 5e-4,
            warmup: 100,
            weight_decay: 0.1,
            grad_clip: 1.0,
            log_every: 100,
        }
    }
}

impl PretrainSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let t = ((step - self.warmup) as f64 / span).min(1.0);
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub losses: Vec<f64>,
    pub seconds: f64,
}

impl PretrainLog {
    /// Mean loss over the last `n` steps.
    pub fn tail_loss(&self, n: usize) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Next-token training on answer positions, cycling through the corpus in
/// order. Consecutive sequences of equal length form a batch.
pub fn pretrain(
    corpus: &[TrainingSequence],
    vocab: Vocabulary,
    config: ModelConfig,
    schedule: &PretrainSchedule,
) -> Result<(TransformerModel, PretrainLog)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("empty pretraining corpus".into()));
    }
    if corpus.iter().all(|s| s.targets.iter().all(Option::is_none)) {
        return Err(Error::Data("pretraining corpus has no supervised tokens".into()));
    }
    if schedule.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let started = Instant::now();
    let mut weights = ModelWeights::init(&config, vocab.n_features(), &mut seeded(config.seed, &["init"]));
    let sizes: Vec<usize> = weights.named().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = AdamW::new(
        OptimizerConfig {
            lr: schedule.lr,
            weight_decay: schedule.weight_decay,
            ..Default::default()
        },
        &sizes,
    );
    let lists = vocab.feature_lists().to_vec();
    let mut log = PretrainLog::default();
    let mut cursor = 0;
    for step in 0..schedule.steps {
        let len = corpus[cursor].tokens.len();
        let mut batch: Vec<&TrainingSequence> = Vec::new();
        while batch.len() < schedule.batch_size && corpus[cursor].tokens.len() == len {
            batch.push(&corpus[cursor]);
            cursor = (cursor + 1) % corpus.len();
            if batch.len() == corpus.len() {
                break;
            }
        }
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (s, seq) in batch.iter().enumerate() {
            for (t, y) in seq.targets.iter().enumerate() {
                if let Some(y) = y {
                    rows.push(s * len + t);
                    targets.push(Some(*y as usize));
                }
            }
        }
        if rows.is_empty() {
            continue;
        }
        let grads = {
            let mut tape = Tape::new();
            let (bound, leaves) = weights.bind_trainable(&mut tape, &lists)?;
            let seqs: Vec<&[u32]> = batch.iter().map(|s| s.tokens.as_slice()).collect();
            let trace = run(&mut tape, &config, &bound, &seqs, &[])?;
            let logits = logits_at(&mut tape, &bound, &trace, &rows)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!("pretraining loss is {value} at step {step}")));
            }
            log.losses.push(value);
            tape.backward(loss)?;
            leaves
                .iter()
                .zip(&sizes)
                .map(|(&v, &n)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]))
                .collect::<Vec<_>>()
        };
        let mut grads = grads;
        if schedule.grad_clip > 0.0 {
            let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Numeric(format!("gradient norm is {norm} at step {step}")));
            }
            if norm > schedule.grad_clip {
                let s = schedule.grad_clip / norm;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let mut params: Vec<&mut [f64]> = weights.tensors_mut().into_iter().map(|t| t.data_mut()).collect();
        opt.step_with_lr(&mut params, &grad_refs, schedule.lr_at(step))?;
        if schedule.log_every > 0 && (step + 1) % schedule.log_every == 0 {
            log::info!(
                "pretrain step {}/{} loss {:.4} ({:.0}s)",
                step + 1,
                schedule.steps,
                log.tail_loss(schedule.log_every),
                started.elapsed().as_secs_f64()
            );
        }
    }
    log.seconds = started.elapsed().as_secs_f64();
    Ok((TransformerModel::new(config, vocab, weights)?, log))
}
