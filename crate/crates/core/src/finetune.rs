//! Fine-tuning an injected vector against word-pair supervision with the
//! model frozen. Only the vector is a trainable leaf.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::data::{RelationDataset, WordPair};
use crate::error::{Error, Result};
use crate::eval::injected_top1_accuracy;
use crate::fv::{FunctionVector, Provenance};
use crate::model::graph::{logits_at, run, TapePatch};
use crate::model::{Mode, Scope, TransformerModel};
use crate::optim::{AdamW, OptimizerConfig};
use crate::prompts::{build_zero_shot_prompt, PromptTemplate};
use crate::rng::seeded;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    #[default]
    FromInitialFv,
    /// A Gaussian direction rescaled to the initial vector's norm.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub lambda: f64,
    /// Injection layer; `None` keeps the initial vector's layer.
    pub layer: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub init: InitMode,
    pub early_stop: bool,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            lr: 0.01,
            epochs: 50,
            lambda: 0.01,
            layer: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            init: InitMode::FromInitialFv,
            early_stop: true,
            patience: 5,
            min_delta: 1e-4,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr < 0.0 || self.lambda.is_nan() || self.lambda < 0.0 || self.epochs == 0 {
            return Err(Error::Config(format!(
                "fine-tune needs lr >= 0, lambda >= 0, epochs >= 1 (got {}, {}, {})",
                self.lr, self.lambda, self.epochs
            )));
        }
        Ok(())
    }

    fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub vector_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub vector_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FineTuneTrace {
    /// One entry per optimizer step.
    pub steps: Vec<StepStats>,
    pub epochs: Vec<EpochStats>,
    /// Monitored zero-shot accuracy before training and after each epoch.
    pub accuracy: Vec<f64>,
    pub final_vector: Vec<f64>,
    pub stopped_early: bool,
}

impl FineTuneTrace {
    /// First epoch whose monitored accuracy reaches `fraction` of the best
    /// accuracy in the trace. Index 0 is the state before training.
    pub fn epochs_to_plateau(&self, fraction: f64) -> Option<usize> {
        let best = self.accuracy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !best.is_finite() {
            return None;
        }
        self.accuracy.iter().position(|&a| a >= fraction * best)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One vector and one supervision pair.
pub struct LossItem<'v> {
    pub vector: &'v [f64],
    pub pair: &'v WordPair,
}

/// Loss and gradient for each item: cross-entropy of the gold first token
/// under the zero-shot prompt with the vector added at `layer`, plus
/// `lambda * ||v||`. Items share forwards but not gradients.
pub fn batch_losses(
    model: &TransformerModel,
    template: &PromptTemplate,
    items: &[LossItem<'_>],
    layer: usize,
    lambda: f64,
) -> Result<Vec<(f64, Vec<f64>)>> {
    let cfg = model.config();
    if layer >= cfg.n_layers {
        return Err(Error::Contract(format!("layer {layer} >= n_layers {}", cfg.n_layers)));
    }
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let vocab = model.vocab();
    let mut prompts = Vec::with_capacity(items.len());
    for it in items {
        if it.vector.len() != cfg.d_model {
            return Err(Error::shape(
                "loss",
                format!("vector has {} dims, d_model is {}", it.vector.len(), cfg.d_model),
            ));
        }
        let p = build_zero_shot_prompt(vocab, template, &it.pair.input)?;
        prompts.push((p.tokens, vocab.first_token(&it.pair.output)? as usize));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, (t, _)) in prompts.iter().enumerate() {
        groups.entry(t.len()).or_default().push(i);
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let mut leaves = vec![None; items.len()];
    let mut losses = vec![None; items.len()];
    for (len, idxs) in &groups {
        let mut patches = Vec::with_capacity(idxs.len());
        for (s, &i) in idxs.iter().enumerate() {
            let v = tape.leaf(Tensor::row_vector(items[i].vector.to_vec()));
            leaves[i] = Some(v);
            patches.push(TapePatch {
                row: s * len + len - 1,
                layer,
                mode: Mode::Add,
                scope: Scope::Residual,
                vector: v,
            });
        }
        let seqs: Vec<&[u32]> = idxs.iter().map(|&i| prompts[i].0.as_slice()).collect();
        let trace = run(&mut tape, cfg, &bound, &seqs, &patches)?;
        for (s, &i) in idxs.iter().enumerate() {
            let logits = logits_at(&mut tape, &bound, &trace, &[s * len + len - 1])?;
            let ce = tape.cross_entropy(logits, &[Some(prompts[i].1)])?;
            let n = tape.l2_norm(patches[s].vector)?;
            let reg = tape.scale(n, lambda)?;
            losses[i] = Some(tape.add(ce, reg)?);
        }
    }
    let losses: Vec<_> = losses.into_iter().map(|l| l.expect("every item grouped")).collect();
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    tape.backward(total)?;
    Ok(losses
        .iter()
        .zip(&leaves)
        .map(|(&l, v)| {
            let v = v.expect("every item grouped");
            let g = tape
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; cfg.d_model]);
            (tape.value(l).data()[0], g)
        })
        .collect())
}

/// Single-pair loss and its gradient with respect to `v`.
pub fn loss_lz(
    model: &TransformerModel,
    template: &PromptTemplate,
    v: &FunctionVector,
    pair: &WordPair,
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    let item = LossItem {
        vector: &v.vector,
        pair,
    };
    let (loss, grad) = batch_losses(model, template, &[item], v.layer, lambda)?.remove(0);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "loss for {:?} on {:?} is {loss}",
            v.relation, pair.input
        )));
    }
    Ok((loss, grad))
}

fn digest(v: &[f64]) -> String {
    let mut h = Sha256::new();
    for x in v {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn initial_vector(init: &FunctionVector, cfg: &FineTuneConfig) -> Vec<f64> {
    match cfg.init {
        InitMode::FromInitialFv => init.vector.clone(),
        InitMode::Random => {
            let mut rng = seeded(cfg.seed, &["random-init", &init.relation]);
            let g: Vec<f64> = (0..init.vector.len())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let scale = init.norm() / norm(&g);
            g.iter().map(|x| x * scale).collect()
        }
    }
}

struct Run<'s> {
    split: &'s RelationDataset,
    monitor: Option<&'s RelationDataset>,
    vector: Vec<f64>,
    init_digest: String,
    opt: AdamW,
    trace: FineTuneTrace,
    order: Vec<usize>,
    epoch_losses: Vec<f64>,
    best: f64,
    wait: usize,
    done: bool,
    failure: Option<Error>,
}

/// Fine-tunes one vector per relation, one pair per relation per batch.
/// Pair order depends only on the seed, relation and epoch, so the result
/// matches fine-tuning each relation on its own. A failing relation is
/// reported in its slot and dropped from later batches.
pub fn batch_finetune_all(
    model: &TransformerModel,
    template: &PromptTemplate,
    inits: &[FunctionVector],
    splits: &[&RelationDataset],
    monitors: Option<&[&RelationDataset]>,
    cfg: &FineTuneConfig,
) -> Vec<Result<(FunctionVector, FineTuneTrace)>> {
    if let Err(e) = cfg.validate() {
        return inits.iter().map(|_| Err(e.replicate())).collect();
    }
    if inits.len() != splits.len() || monitors.is_some_and(|m| m.len() != inits.len()) {
        let e = Error::Contract("one split (and monitor) per initial vector".into());
        return inits.iter().map(|_| Err(e.replicate())).collect();
    }
    let layer_of = |fv: &FunctionVector| cfg.layer.unwrap_or(fv.layer);
    let mut runs: Vec<Run> = inits
        .iter()
        .zip(splits)
        .enumerate()
        .map(|(i, (fv, split))| {
            let vector = initial_vector(fv, cfg);
            let failure = if split.is_empty() {
                Some(Error::Data(format!(
                    "fine-tune split for {:?} is empty",
                    split.relation_id
                )))
            } else {
                fv.validate().err()
            };
            Run {
                split,
                monitor: monitors.map(|m| m[i]),
                init_digest: digest(&vector),
                opt: AdamW::new(cfg.optimizer(), &[vector.len()]),
                vector,
                trace: FineTuneTrace::default(),
                order: Vec::new(),
                epoch_losses: Vec::new(),
                best: f64::INFINITY,
                wait: 0,
                done: failure.is_some(),
                failure,
            }
        })
        .collect();

    // Runs are grouped by injection layer; each group shares forwards.
    let mut by_layer: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, fv) in inits.iter().enumerate() {
        by_layer.entry(layer_of(fv)).or_default().push(i);
    }

    let monitor_all = |runs: &mut Vec<Run>, idxs: &[usize], layer: usize| {
        for &i in idxs {
            let r = &mut runs[i];
            if r.done {
                continue;
            }
            if let Some(m) = r.monitor {
                match injected_top1_accuracy(model, template, &m.pairs, &r.vector, layer) {
                    Ok(a) => r.trace.accuracy.push(a),
                    Err(e) => {
                        r.failure = Some(e);
                        r.done = true;
                    }
                }
            }
        }
    };

    for (&layer, idxs) in &by_layer {
        monitor_all(&mut runs, idxs, layer);
        for epoch in 0..cfg.epochs {
            for &i in idxs {
                let r = &mut runs[i];
                if r.done {
                    continue;
                }
                r.order = (0..r.split.len()).collect();
                let epoch_label = epoch.to_string();
                r.order
                    .shuffle(&mut seeded(cfg.seed, &["finetune", &r.split.relation_id, &epoch_label]));
                r.epoch_losses.clear();
            }
            let n_batches = idxs
                .iter()
                .filter(|&&i| !runs[i].done)
                .map(|&i| runs[i].split.len())
                .max()
                .unwrap_or(0);
            if n_batches == 0 {
                break;
            }
            for b in 0..n_batches {
                let active: Vec<usize> = idxs
                    .iter()
                    .copied()
                    .filter(|&i| !runs[i].done && b < runs[i].split.len())
                    .collect();
                if active.is_empty() {
                    continue;
                }
                let items: Vec<LossItem> = active
                    .iter()
                    .map(|&i| LossItem {
                        vector: &runs[i].vector,
                        pair: &runs[i].split.pairs[runs[i].order[b]],
                    })
                    .collect();
                let results = match batch_losses(model, template, &items, layer, cfg.lambda) {
                    Ok(r) => r,
                    Err(e) => {
                        for &i in &active {
                            runs[i].failure = Some(e.replicate());
                            runs[i].done = true;
                        }
                        continue;
                    }
                };
                for (&i, (loss, grad)) in active.iter().zip(results) {
                    let r = &mut runs[i];
                    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                        r.failure = Some(Error::Numeric(format!(
                            "fine-tuning {:?} diverged at epoch {epoch} (loss {loss})",
                            r.split.relation_id
                        )));
                        r.done = true;
                        continue;
                    }
                    if let Err(e) = r.opt.step(&mut [r.vector.as_mut_slice()], &[grad.as_slice()]) {
                        r.failure = Some(e);
                        r.done = true;
                        continue;
                    }
                    r.epoch_losses.push(loss);
                    r.trace.steps.push(StepStats {
                        epoch,
                        loss,
                        grad_norm: norm(&grad),
                        vector_norm: norm(&r.vector),
                    });
                }
            }
            for &i in idxs {
                let r = &mut runs[i];
                if r.done {
                    continue;
                }
                let mean = r.epoch_losses.iter().sum::<f64>() / r.epoch_losses.len() as f64;
                r.trace.epochs.push(EpochStats {
                    epoch,
                    mean_loss: mean,
                    vector_norm: norm(&r.vector),
                });
                if r.best - mean > cfg.min_delta {
                    r.best = mean;
                    r.wait = 0;
                } else {
                    r.wait += 1;
                }
                if cfg.early_stop && r.wait >= cfg.patience {
                    r.trace.stopped_early = true;
                }
            }
            monitor_all(&mut runs, idxs, layer);
            for &i in idxs {
                if runs[i].trace.stopped_early {
                    runs[i].done = true;
                }
            }
        }
    }

    runs.into_iter()
        .zip(inits)
        .map(|(mut r, init)| {
            if let Some(e) = r.failure {
                return Err(e);
            }
            r.trace.final_vector = r.vector.clone();
            let mut fv = FunctionVector::new(init.relation.clone(), layer_of(init), Provenance::FineTuned, r.vector)?;
            fv.heads = init.heads.clone();
            let fv = fv
                .with_meta("config", cfg)
                .with_meta("init_digest", &r.init_digest)
                .with_meta("initial_fv_digest", digest(&init.vector))
                .with_meta("epochs_run", r.trace.epochs.len());
            Ok((fv, r.trace))
        })
        .collect()
}

pub fn finetune_fv(
    model: &TransformerModel,
    template: &PromptTemplate,
    init: &FunctionVector,
    split: &RelationDataset,
    cfg: &FineTuneConfig,
) -> Result<(FunctionVector, FineTuneTrace)> {
    batch_finetune_all(model, template, std::slice::from_ref(init), &[split], None, cfg).remove(0)
}
