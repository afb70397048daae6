//! Function-vector extraction: mean head activations on intact prompts,
//! causal indirect effects on shuffled prompts, head selection, and the
//! ActAdd and mean-centering baselines.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::data::{RelationDataset, WordPair};
use crate::error::{Error, Result};
use crate::model::{BatchItem, InterventionSpec, TransformerModel};
use crate::prompts::{build_icl_prompt, build_shuffled_prompt, PromptTemplate};
use crate::rng::seeded;
use crate::tensor::softmax;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Initial,
    FineTuned,
    Composite,
    Actadd,
    MeanCentered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionVector {
    pub relation: String,
    pub layer: usize,
    pub provenance: Provenance,
    pub heads: Vec<(usize, usize)>,
    pub vector: Vec<f64>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl FunctionVector {
    pub fn new(relation: impl Into<String>, layer: usize, provenance: Provenance, vector: Vec<f64>) -> Result<Self> {
        let fv = FunctionVector {
            relation: relation.into(),
            layer,
            provenance,
            heads: Vec::new(),
            vector,
            meta: BTreeMap::new(),
        };
        fv.validate()?;
        Ok(fv)
    }

    pub fn zeros(relation: impl Into<String>, layer: usize, provenance: Provenance, dim: usize) -> Self {
        FunctionVector {
            relation: relation.into(),
            layer,
            provenance,
            heads: Vec::new(),
            vector: vec![0.0; dim],
            meta: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vector.is_empty() {
            return Err(Error::Data(format!("function vector {:?} is empty", self.relation)));
        }
        if self.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "function vector {:?} is not finite",
                self.relation
            )));
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Add-mode injection at the final token of the injection layer.
    pub fn intervention(&self) -> InterventionSpec {
        InterventionSpec::add(self.layer, self.vector.clone())
    }

    pub fn with_meta(mut self, key: &str, value: impl Serialize) -> Self {
        self.meta.insert(
            key.to_string(),
            serde_json::to_value(value).unwrap_or(serde_json::Value::Null),
        );
        self
    }
}

pub fn save_function_vector(fv: &FunctionVector, path: impl AsRef<Path>) -> Result<()> {
    fv.validate()?;
    let path = path.as_ref();
    std::fs::write(path, serde_json::to_string_pretty(fv)?).map_err(|e| Error::io(path, e))
}

pub fn load_function_vector(path: impl AsRef<Path>) -> Result<FunctionVector> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let fv: FunctionVector = serde_json::from_str(&text)?;
    fv.validate()?;
    Ok(fv)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMeanActivations {
    pub relation: String,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// `[layer][head][d_model]`.
    pub values: Vec<f64>,
    pub n_prompts: usize,
}

impl HeadMeanActivations {
    pub fn head(&self, layer: usize, head: usize) -> &[f64] {
        let start = (layer * self.n_heads + head) * self.d_model;
        &self.values[start..start + self.d_model]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CieTable {
    pub relation: String,
    pub n_layers: usize,
    pub n_heads: usize,
    /// `[layer][head]`.
    pub values: Vec<f64>,
    pub n_prompts: usize,
}

impl CieTable {
    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.values[layer * self.n_heads + head]
    }

    pub fn mean_over(&self, heads: &HeadSet) -> f64 {
        let s: f64 = heads.heads.iter().map(|&(l, j)| self.get(l, j)).sum();
        s / heads.len().max(1) as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSet {
    pub heads: Vec<(usize, usize)>,
}

impl HeadSet {
    pub fn new(heads: Vec<(usize, usize)>, n_layers: usize, n_heads: usize) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for &(l, j) in &heads {
            if l >= n_layers || j >= n_heads {
                return Err(Error::Contract(format!("head ({l}, {j}) outside {n_layers}x{n_heads}")));
            }
            if !seen.insert((l, j)) {
                return Err(Error::Contract(format!("duplicate head ({l}, {j})")));
            }
        }
        Ok(HeadSet { heads })
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    pub shots: usize,
    pub mean_prompts: usize,
    pub cie_prompts: usize,
    /// Heads summed into each vector. The toy model's layer-0 heads carry
    /// the output form, which a shuffled prompt keeps, so their CIE ranks
    /// last; 14 of 16 reaches them.
    pub top_k: usize,
    /// Injection layer; `None` means the middle of the model.
    pub layer: Option<usize>,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            shots: 10,
            mean_prompts: 32,
            cie_prompts: 32,
            top_k: 14,
            layer: None,
        }
    }
}

fn sample_query_and_demos<R: Rng>(pairs: &[WordPair], shots: usize, rng: &mut R) -> (Vec<WordPair>, WordPair) {
    let mut picked: Vec<WordPair> = pairs.choose_multiple(rng, shots + 1).cloned().collect();
    let query = picked.pop().expect("shots + 1 pairs");
    (picked, query)
}

fn require_pairs(split: &RelationDataset, shots: usize) -> Result<()> {
    if split.len() < shots + 1 {
        return Err(Error::Data(format!(
            "relation {:?} has {} pairs, {shots}-shot prompts need {}",
            split.relation_id,
            split.len(),
            shots + 1
        )));
    }
    Ok(())
}

/// Mean per-head contributions at the final token of the given prompts.
pub fn mean_head_activations(
    model: &TransformerModel,
    relation: &str,
    prompts: &[Vec<u32>],
) -> Result<HeadMeanActivations> {
    if prompts.is_empty() {
        return Err(Error::Contract("mean over zero prompts".into()));
    }
    let cfg = model.config();
    let items: Vec<BatchItem> = prompts
        .iter()
        .map(|t| BatchItem {
            tokens: t,
            interventions: Vec::new(),
        })
        .collect();
    let readouts = model.final_readouts(&items, true)?;
    let mut values = vec![0.0; cfg.n_layers * cfg.n_heads * cfg.d_model];
    for r in &readouts {
        values.iter_mut().zip(&r.heads).for_each(|(a, x)| *a += x);
    }
    let n = prompts.len() as f64;
    values.iter_mut().for_each(|a| *a /= n);
    Ok(HeadMeanActivations {
        relation: relation.to_string(),
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        d_model: cfg.d_model,
        values,
        n_prompts: prompts.len(),
    })
}

/// Means over `n_prompts` intact `shots`-shot prompts sampled from `split`.
pub fn mean_task_activations(
    model: &TransformerModel,
    template: &PromptTemplate,
    split: &RelationDataset,
    shots: usize,
    n_prompts: usize,
    seed: u64,
) -> Result<HeadMeanActivations> {
    require_pairs(split, shots)?;
    let mut rng = seeded(seed, &["means", &split.relation_id]);
    let prompts = (0..n_prompts)
        .map(|_| {
            let (demos, query) = sample_query_and_demos(&split.pairs, shots, &mut rng);
            Ok(build_icl_prompt(model.vocab(), template, &demos, &query.input, Some(&split.relation_id))?.tokens)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_head_activations(model, &split.relation_id, &prompts)
}

/// CIE per head over the given prompts and gold first tokens. Each head is
/// replaced at the final token by its mean activation.
pub fn cie_for_prompts(
    model: &TransformerModel,
    means: &HeadMeanActivations,
    prompts: &[(Vec<u32>, u32)],
) -> Result<CieTable> {
    let cfg = model.config();
    if (means.n_layers, means.n_heads, means.d_model) != (cfg.n_layers, cfg.n_heads, cfg.d_model) {
        return Err(Error::Contract("mean activations do not match the model".into()));
    }
    if prompts.is_empty() {
        return Err(Error::Contract("CIE over zero prompts".into()));
    }
    let n_slots = cfg.n_layers * cfg.n_heads;
    let mut items = Vec::with_capacity(prompts.len() * (n_slots + 1));
    for (tokens, _) in prompts {
        items.push(BatchItem {
            tokens,
            interventions: Vec::new(),
        });
        for l in 0..cfg.n_layers {
            for j in 0..cfg.n_heads {
                items.push(BatchItem {
                    tokens,
                    interventions: vec![InterventionSpec::replace_head(l, j, means.head(l, j).to_vec())],
                });
            }
        }
    }
    let logits = model.final_logits(&items)?;
    let mut values = vec![0.0; n_slots];
    for (p, (_, gold)) in prompts.iter().enumerate() {
        let block = &logits[p * (n_slots + 1)..(p + 1) * (n_slots + 1)];
        let base = softmax(&block[0])[*gold as usize];
        for (v, patched) in values.iter_mut().zip(&block[1..]) {
            *v += softmax(patched)[*gold as usize] - base;
        }
    }
    let n = prompts.len() as f64;
    values.iter_mut().for_each(|v| *v /= n);
    Ok(CieTable {
        relation: means.relation.clone(),
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        values,
        n_prompts: prompts.len(),
    })
}

/// CIE over `n_prompts` shuffled-label prompts sampled from `split`.
pub fn compute_cie(
    model: &TransformerModel,
    template: &PromptTemplate,
    split: &RelationDataset,
    means: &HeadMeanActivations,
    shots: usize,
    n_prompts: usize,
    seed: u64,
) -> Result<CieTable> {
    if means.relation != split.relation_id {
        return Err(Error::Contract(format!(
            "means for {:?} used with relation {:?}",
            means.relation, split.relation_id
        )));
    }
    require_pairs(split, shots.max(2))?;
    let mut rng = seeded(seed, &["cie", &split.relation_id]);
    let vocab = model.vocab();
    let prompts = (0..n_prompts)
        .map(|_| {
            let (demos, query) = sample_query_and_demos(&split.pairs, shots.max(2), &mut rng);
            let p = build_shuffled_prompt(
                vocab,
                template,
                &demos,
                &query.input,
                rng.next_u64(),
                Some(&split.relation_id),
            )?;
            Ok((p.tokens, vocab.first_token(&query.output)?))
        })
        .collect::<Result<Vec<_>>>()?;
    cie_for_prompts(model, means, &prompts)
}

/// Top-k heads by CIE averaged over `tables`; ties go to the lower
/// `(layer, head)`.
pub fn select_top_heads(tables: &[CieTable], k: usize) -> Result<HeadSet> {
    let first = tables.first().ok_or_else(|| Error::Contract("no CIE tables".into()))?;
    let (nl, nh) = (first.n_layers, first.n_heads);
    if tables.iter().any(|t| (t.n_layers, t.n_heads) != (nl, nh)) {
        return Err(Error::Contract("CIE tables have different shapes".into()));
    }
    if k == 0 || k > nl * nh {
        return Err(Error::Contract(format!("k = {k} with {} heads", nl * nh)));
    }
    let n = tables.len() as f64;
    let avg: Vec<f64> = (0..nl * nh)
        .map(|i| tables.iter().map(|t| t.values[i]).sum::<f64>() / n)
        .collect();
    let mut order: Vec<usize> = (0..nl * nh).collect();
    order.sort_by(|&a, &b| avg[b].total_cmp(&avg[a]).then(a.cmp(&b)));
    let heads = order[..k].iter().map(|&i| (i / nh, i % nh)).collect();
    HeadSet::new(heads, nl, nh)
}

pub fn build_function_vector(means: &HeadMeanActivations, heads: &HeadSet, layer: usize) -> Result<FunctionVector> {
    if heads.is_empty() {
        return Err(Error::Contract("empty head set".into()));
    }
    let mut v = vec![0.0; means.d_model];
    for &(l, j) in &heads.heads {
        if l >= means.n_layers || j >= means.n_heads {
            return Err(Error::Contract(format!("head ({l}, {j}) out of range")));
        }
        v.iter_mut().zip(means.head(l, j)).for_each(|(a, x)| *a += x);
    }
    let mut fv = FunctionVector::new(means.relation.clone(), layer, Provenance::Initial, v)?;
    fv.heads = heads.heads.clone();
    Ok(fv.with_meta("n_prompts", means.n_prompts))
}

/// Hidden states at the final token of each prompt after block `layer`.
pub fn final_hidden_states(model: &TransformerModel, prompts: &[Vec<u32>], layer: usize) -> Result<Vec<Vec<f64>>> {
    let cfg = model.config();
    if layer >= cfg.n_layers {
        return Err(Error::Contract(format!("layer {layer} >= n_layers {}", cfg.n_layers)));
    }
    let items: Vec<BatchItem> = prompts
        .iter()
        .map(|t| BatchItem {
            tokens: t,
            interventions: Vec::new(),
        })
        .collect();
    Ok(model
        .final_readouts(&items, true)?
        .iter()
        .map(|r| r.hidden(cfg, layer).to_vec())
        .collect())
}

/// `c * h+` or `c * (h+ - h-)` at layer `layer`.
pub fn actadd_vector(
    model: &TransformerModel,
    relation: &str,
    positive: &[u32],
    negative: Option<&[u32]>,
    layer: usize,
    coefficient: f64,
) -> Result<FunctionVector> {
    let mut prompts = vec![positive.to_vec()];
    if let Some(n) = negative {
        prompts.push(n.to_vec());
    }
    let h = final_hidden_states(model, &prompts, layer)?;
    let v: Vec<f64> = match h.get(1) {
        Some(neg) => h[0].iter().zip(neg).map(|(p, n)| coefficient * (p - n)).collect(),
        None => h[0].iter().map(|p| coefficient * p).collect(),
    };
    Ok(FunctionVector::new(relation, layer, Provenance::Actadd, v)?.with_meta("coefficient", coefficient))
}

/// Mean final-token hidden state at `layer` over `prompts`.
pub fn corpus_mean_hidden(model: &TransformerModel, prompts: &[Vec<u32>], layer: usize) -> Result<Vec<f64>> {
    if prompts.is_empty() {
        return Err(Error::Contract("mean over zero prompts".into()));
    }
    let h = final_hidden_states(model, prompts, layer)?;
    let mut mean = vec![0.0; model.config().d_model];
    for row in &h {
        mean.iter_mut().zip(row).for_each(|(a, x)| *a += x);
    }
    mean.iter_mut().for_each(|a| *a /= prompts.len() as f64);
    Ok(mean)
}

pub fn mean_center(fv: &FunctionVector, corpus_mean: &[f64]) -> Result<FunctionVector> {
    if corpus_mean.len() != fv.vector.len() {
        return Err(Error::shape(
            "mean_center",
            format!("vector has {} dims, mean has {}", fv.vector.len(), corpus_mean.len()),
        ));
    }
    let v = fv.vector.iter().zip(corpus_mean).map(|(a, m)| a - m).collect();
    let mut out = FunctionVector::new(fv.relation.clone(), fv.layer, Provenance::MeanCentered, v)?;
    out.heads = fv.heads.clone();
    Ok(out)
}

/// Everything extraction produces for a group of relations that share one
/// head set.
#[derive(Clone, Debug)]
pub struct Extraction {
    pub means: Vec<HeadMeanActivations>,
    pub cie: Vec<CieTable>,
    pub heads: HeadSet,
    pub vectors: Vec<FunctionVector>,
}

/// Means and CIE for every split, heads chosen on the averaged CIE, then one
/// initial vector per relation.
pub fn extract_function_vectors(
    model: &TransformerModel,
    template: &PromptTemplate,
    splits: &[&RelationDataset],
    config: &ExtractionConfig,
    seed: u64,
) -> Result<Extraction> {
    let layer = config.layer.unwrap_or_else(|| model.config().default_layer());
    let mut means = Vec::with_capacity(splits.len());
    let mut cie = Vec::with_capacity(splits.len());
    for split in splits {
        let m = mean_task_activations(model, template, split, config.shots, config.mean_prompts, seed)?;
        let c = compute_cie(model, template, split, &m, config.shots, config.cie_prompts, seed)?;
        log::info!(
            "extract {}: max CIE {:.4}",
            split.relation_id,
            c.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        );
        means.push(m);
        cie.push(c);
    }
    let heads = select_top_heads(&cie, config.top_k)?;
    let vectors = means
        .iter()
        .map(|m| build_function_vector(m, &heads, layer))
        .collect::<Result<Vec<_>>>()?;
    Ok(Extraction {
        means,
        cie,
        heads,
        vectors,
    })
}
