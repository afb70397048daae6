//! Decoder-only transformer with per-head decomposition and intervention
//! hooks.
//!
//! Blocks are pre-LN GPT blocks. Layer `l` refers to block `l` (0-based);
//! "the hidden state at layer `l`" is that block's output. Head
//! contributions are recorded after the output projection, so they live in
//! residual space and sum (with the output bias) to the attention output.

mod checkpoint;
pub(crate) mod graph;
mod pretrain;
mod weights;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use graph::{Mode, Scope};
pub use pretrain::{pretrain, PretrainLog, PretrainSchedule};
pub use weights::{LayerWeights, ModelWeights};

use crate::autodiff::Tape;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::{softmax, Tensor};
use graph::{logits_at, run, run_blocks, TapePatch};

/// Shortest context every model must accept: a 10-shot prompt in the
/// default template (six tokens per pair plus a four-token query).
pub const MIN_CONTEXT: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// 4 layers, 4 heads of width 32, d_model 128, MLP width 256, 128
    /// positions.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_head: 32,
            d_mlp: 256,
            vocab_size,
            max_seq_len: 128,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model != self.n_heads * self.d_head {
            return fail(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if self.n_layers < 2 {
            return fail("need at least 2 layers".into());
        }
        if self.max_seq_len < MIN_CONTEXT {
            return fail(format!("max_seq_len must be at least {MIN_CONTEXT}"));
        }
        if self.vocab_size == 0 || self.d_mlp == 0 || self.d_head == 0 {
            return fail("zero-sized dimension".into());
        }
        Ok(())
    }

    /// Default injection layer: the middle of the stack.
    pub fn default_layer(&self) -> usize {
        self.n_layers / 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Position {
    Final,
    At(usize),
}

impl Position {
    fn resolve(self, len: usize) -> Result<usize> {
        let p = match self {
            Position::Final => len.checked_sub(1),
            Position::At(p) => Some(p),
        };
        p.filter(|&p| p < len)
            .ok_or_else(|| Error::Contract(format!("position {self:?} outside a {len}-token prompt")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub layer: usize,
    pub position: Position,
    pub vector: Vec<f64>,
    pub mode: Mode,
    pub scope: Scope,
}

impl InterventionSpec {
    /// Adds `vector` to the hidden state at layer `layer`, final token.
    pub fn add(layer: usize, vector: Vec<f64>) -> Self {
        InterventionSpec {
            layer,
            position: Position::Final,
            vector,
            mode: Mode::Add,
            scope: Scope::Residual,
        }
    }

    /// Replaces head `(layer, head)`'s contribution at the final token.
    pub fn replace_head(layer: usize, head: usize, vector: Vec<f64>) -> Self {
        InterventionSpec {
            layer,
            position: Position::Final,
            vector,
            mode: Mode::Replace,
            scope: Scope::Head(head),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum RecordPositions {
    #[default]
    None,
    Final,
    All,
    At(Vec<usize>),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RecordSpec {
    pub positions: RecordPositions,
    pub heads: bool,
    pub hidden: bool,
}

impl RecordSpec {
    pub fn final_heads() -> Self {
        RecordSpec {
            positions: RecordPositions::Final,
            heads: true,
            hidden: false,
        }
    }

    pub fn final_hidden() -> Self {
        RecordSpec {
            positions: RecordPositions::Final,
            heads: false,
            hidden: true,
        }
    }
}

/// Detached copies of activations from one forward.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationRecord {
    /// `(layer, head, position)` to residual-space contribution.
    pub heads: BTreeMap<(usize, usize, usize), Vec<f64>>,
    /// `(layer, position)` to block output.
    pub hidden: BTreeMap<(usize, usize), Vec<f64>>,
}

impl ActivationRecord {
    pub fn head(&self, layer: usize, head: usize, pos: usize) -> Option<&[f64]> {
        self.heads.get(&(layer, head, pos)).map(Vec::as_slice)
    }

    pub fn hidden(&self, layer: usize, pos: usize) -> Option<&[f64]> {
        self.hidden.get(&(layer, pos)).map(Vec::as_slice)
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[seq_len, vocab]`.
    pub logits: Tensor,
    pub record: ActivationRecord,
}

/// One prompt of a batched read-out.
#[derive(Clone, Debug)]
pub struct BatchItem<'p> {
    pub tokens: &'p [u32],
    pub interventions: Vec<InterventionSpec>,
}

/// Final-position read-out of one prompt. `heads` is laid out
/// `[layer][head][d_model]` and `hidden` `[layer][d_model]`; both are empty
/// unless recording was requested.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Readout {
    pub logits: Vec<f64>,
    pub heads: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl Readout {
    pub fn head(&self, cfg: &ModelConfig, layer: usize, head: usize) -> &[f64] {
        let start = (layer * cfg.n_heads + head) * cfg.d_model;
        &self.heads[start..start + cfg.d_model]
    }

    pub fn hidden(&self, cfg: &ModelConfig, layer: usize) -> &[f64] {
        &self.hidden[layer * cfg.d_model..(layer + 1) * cfg.d_model]
    }
}

/// A trained, frozen model. No method takes `&mut self`, so weights cannot
/// change once constructed.
#[derive(Clone, Debug)]
pub struct TransformerModel {
    config: ModelConfig,
    vocab: Vocabulary,
    weights: ModelWeights,
    embed: Tensor,
}

impl TransformerModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens, config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        if weights.features.shape() != [vocab.n_features(), config.d_model]
            || weights.layers.len() != config.n_layers
            || weights.positions.shape() != [config.max_seq_len, config.d_model]
        {
            return Err(Error::Config("weights do not match the config".into()));
        }
        let embed = weights.embedding_table(vocab.feature_lists());
        Ok(TransformerModel {
            config,
            vocab,
            weights,
            embed,
        })
    }

    /// Freshly initialized (untrained) model.
    pub fn init(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.seed, &["init"]);
        let weights = ModelWeights::init(&config, vocab.n_features(), &mut rng);
        Self::new(config, vocab, weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn weights_digest(&self) -> String {
        self.weights.digest()
    }

    /// Token embedding (and tied unembedding) table.
    pub fn embedding_table(&self) -> &Tensor {
        &self.embed
    }

    pub(crate) fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> weights::Bound {
        self.weights.bind_frozen(tape, &self.embed)
    }

    fn check_vector(&self, iv: &InterventionSpec) -> Result<()> {
        if iv.layer >= self.config.n_layers {
            return Err(Error::Contract(format!(
                "intervention layer {} >= n_layers {}",
                iv.layer, self.config.n_layers
            )));
        }
        if iv.vector.len() != self.config.d_model {
            return Err(Error::shape(
                "intervention",
                format!(
                    "vector has {} dims, d_model is {}",
                    iv.vector.len(),
                    self.config.d_model
                ),
            ));
        }
        Ok(())
    }

    fn patches<'a>(
        &self,
        tape: &mut Tape<'a>,
        interventions: &[InterventionSpec],
        seq: usize,
        len: usize,
    ) -> Result<Vec<TapePatch>> {
        interventions
            .iter()
            .map(|iv| {
                self.check_vector(iv)?;
                let pos = iv.position.resolve(len)?;
                let vector = tape.constant_owned(Tensor::row_vector(iv.vector.clone()));
                Ok(TapePatch {
                    row: seq * len + pos,
                    layer: iv.layer,
                    mode: iv.mode,
                    scope: iv.scope,
                    vector,
                })
            })
            .collect()
    }

    /// Full forward with interventions; returns logits at every position.
    pub fn forward(
        &self,
        tokens: &[u32],
        interventions: &[InterventionSpec],
        record: &RecordSpec,
    ) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let patches = self.patches(&mut tape, interventions, 0, tokens.len())?;
        let trace = run(&mut tape, &self.config, &bound, &[tokens], &patches)?;
        let rows: Vec<usize> = (0..tokens.len()).collect();
        let logits = logits_at(&mut tape, &bound, &trace, &rows)?;
        let positions: Vec<usize> = match &record.positions {
            RecordPositions::None => Vec::new(),
            RecordPositions::Final => vec![tokens.len() - 1],
            RecordPositions::All => rows.clone(),
            RecordPositions::At(ps) => {
                if let Some(p) = ps.iter().find(|&&p| p >= tokens.len()) {
                    return Err(Error::Contract(format!("record position {p} out of range")));
                }
                ps.clone()
            }
        };
        let mut rec = ActivationRecord::default();
        for &pos in &positions {
            for l in 0..self.config.n_layers {
                if record.heads {
                    for j in 0..self.config.n_heads {
                        let row = tape.value(trace.heads[l][j]).row(pos).to_vec();
                        rec.heads.insert((l, j, pos), row);
                    }
                }
                if record.hidden {
                    rec.hidden
                        .insert((l, pos), tape.value(trace.layer_out[l]).row(pos).to_vec());
                }
            }
        }
        Ok(ForwardOutput {
            logits: tape.value(logits).clone(),
            record: rec,
        })
    }

    /// Next-token distribution after the final prompt token.
    pub fn next_token_distribution(&self, tokens: &[u32], interventions: &[InterventionSpec]) -> Result<Vec<f64>> {
        let item = BatchItem {
            tokens,
            interventions: interventions.to_vec(),
        };
        Ok(self.final_distributions(std::slice::from_ref(&item))?.remove(0))
    }

    /// Final-position distributions for many prompts. Prompts of equal
    /// length share one stacked forward; results keep input order.
    pub fn final_distributions(&self, items: &[BatchItem<'_>]) -> Result<Vec<Vec<f64>>> {
        Ok(self.final_logits(items)?.into_iter().map(|l| softmax(&l)).collect())
    }

    /// Final-position logits for many prompts (see [`Self::final_distributions`]).
    pub fn final_logits(&self, items: &[BatchItem<'_>]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .final_readouts(items, false)?
            .into_iter()
            .map(|r| r.logits)
            .collect())
    }

    /// Final-position logits and, if `record`, detached head contributions
    /// and hidden states at the final position for every layer.
    pub fn final_readouts(&self, items: &[BatchItem<'_>], record: bool) -> Result<Vec<Readout>> {
        let mut out = vec![Readout::default(); items.len()];
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, it) in items.iter().enumerate() {
            if it.tokens.is_empty() {
                return Err(Error::Contract("empty prompt".into()));
            }
            groups.entry(it.tokens.len()).or_default().push(i);
        }
        // Bounded batch rows keep the tape small.
        let max_rows = 4096;
        let (n_layers, n_heads) = (self.config.n_layers, self.config.n_heads);
        for (len, idxs) in groups {
            for chunk in idxs.chunks((max_rows / len).max(1)) {
                let mut tape = Tape::new();
                let bound = self.bind(&mut tape);
                let mut patches = Vec::new();
                for (s, &i) in chunk.iter().enumerate() {
                    patches.extend(self.patches(&mut tape, &items[i].interventions, s, len)?);
                }
                let seqs: Vec<&[u32]> = chunk.iter().map(|&i| items[i].tokens).collect();
                let trace = run(&mut tape, &self.config, &bound, &seqs, &patches)?;
                let rows: Vec<usize> = (0..chunk.len()).map(|s| s * len + len - 1).collect();
                let logits = logits_at(&mut tape, &bound, &trace, &rows)?;
                for (s, &i) in chunk.iter().enumerate() {
                    let r = &mut out[i];
                    r.logits = tape.value(logits).row(s).to_vec();
                    if record {
                        let row = rows[s];
                        let mut heads = Vec::with_capacity(n_layers * n_heads * self.config.d_model);
                        let mut hidden = Vec::with_capacity(n_layers * self.config.d_model);
                        for l in 0..n_layers {
                            for j in 0..n_heads {
                                heads.extend_from_slice(tape.value(trace.heads[l][j]).row(row));
                            }
                            hidden.extend_from_slice(tape.value(trace.layer_out[l]).row(row));
                        }
                        r.heads = heads;
                        r.hidden = hidden;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Runs one hidden vector through layers `start_layer..` at a single
    /// position, then the final norm and unembedding.
    pub fn decode_from_layer(&self, hidden: &[f64], start_layer: usize) -> Result<Vec<f64>> {
        if hidden.len() != self.config.d_model {
            return Err(Error::shape(
                "decode_from_layer",
                format!("hidden has {} dims, d_model is {}", hidden.len(), self.config.d_model),
            ));
        }
        if start_layer > self.config.n_layers {
            return Err(Error::Contract(format!(
                "start layer {start_layer} > n_layers {}",
                self.config.n_layers
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.constant_owned(Tensor::row_vector(hidden.to_vec()));
        let trace = run_blocks(&mut tape, &self.config, &bound, x, 1, start_layer, &[])?;
        let logits = logits_at(&mut tape, &bound, &trace, &[0])?;
        Ok(softmax(tape.value(logits).row(0)))
    }
}

#[cfg(test)]
mod tests;
