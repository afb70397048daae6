//! Composite function vectors for one-shot analogies.
//!
//! A source pair `(q, r)` is scored against every basis vector, the scores
//! become a posterior over relations, an affine map turns the posterior into
//! mixing weights, and the weighted sum of basis vectors is injected into the
//! zero-shot prompt for the target word.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::data::{AnalogyProblem, RelationDataset, WordPair};
use crate::error::{Error, Result};
use crate::fv::{FunctionVector, Provenance};
use crate::model::graph::{logits_at, run, TapePatch};
use crate::model::{BatchItem, Mode, Scope, TransformerModel};
use crate::optim::{AdamW, OptimizerConfig};
use crate::prompts::{build_zero_shot_prompt, PromptTemplate};
use crate::rng::seeded;
use crate::tensor::{softmax, top_k, Tensor};

/// An ordered set of basis vectors sharing one injection layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Basis {
    vectors: Vec<FunctionVector>,
}

impl Basis {
    pub fn new(vectors: Vec<FunctionVector>) -> Result<Self> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::Contract("empty relation basis".into()))?;
        let mut ids = std::collections::BTreeSet::new();
        for v in &vectors {
            v.validate()?;
            if v.layer != first.layer || v.vector.len() != first.vector.len() {
                return Err(Error::Contract(format!(
                    "basis vector {:?} disagrees on layer or width with {:?}",
                    v.relation, first.relation
                )));
            }
            if !ids.insert(v.relation.as_str()) {
                return Err(Error::Contract(format!(
                    "relation {:?} appears twice in the basis",
                    v.relation
                )));
            }
        }
        Ok(Basis { vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[FunctionVector] {
        &self.vectors
    }

    pub fn ids(&self) -> Vec<String> {
        self.vectors.iter().map(|v| v.relation.clone()).collect()
    }

    pub fn layer(&self) -> usize {
        self.vectors[0].layer
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].vector.len()
    }

    pub fn digest(&self) -> String {
        order_digest(&self.ids())
    }

    fn matrix(&self) -> Tensor {
        let data = self.vectors.iter().flat_map(|v| v.vector.iter().copied()).collect();
        Tensor::matrix(self.len(), self.dim(), data).expect("validated widths")
    }
}

fn order_digest(ids: &[String]) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationScores {
    pub basis: Vec<String>,
    /// Probability of the source output's first token with each basis
    /// vector injected.
    pub scores: Vec<f64>,
}

/// Scores for many source pairs; all forwards are batched.
pub fn relation_scores_many(
    model: &TransformerModel,
    template: &PromptTemplate,
    basis: &Basis,
    sources: &[WordPair],
) -> Result<Vec<RelationScores>> {
    let vocab = model.vocab();
    let mut prompts = Vec::with_capacity(sources.len());
    for s in sources {
        let p = build_zero_shot_prompt(vocab, template, &s.input)?;
        prompts.push((p.tokens, vocab.first_token(&s.output)? as usize));
    }
    let mut items = Vec::with_capacity(sources.len() * basis.len());
    for (tokens, _) in &prompts {
        for v in basis.vectors() {
            items.push(BatchItem {
                tokens,
                interventions: vec![v.intervention()],
            });
        }
    }
    let logits = model.final_logits(&items)?;
    Ok(prompts
        .iter()
        .enumerate()
        .map(|(i, (_, gold))| RelationScores {
            basis: basis.ids(),
            scores: (0..basis.len())
                .map(|z| softmax(&logits[i * basis.len() + z])[*gold])
                .collect(),
        })
        .collect())
}

pub fn relation_scores(
    model: &TransformerModel,
    template: &PromptTemplate,
    basis: &Basis,
    source: &WordPair,
) -> Result<RelationScores> {
    Ok(relation_scores_many(model, template, basis, std::slice::from_ref(source))?.remove(0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosteriorMode {
    /// Softmax applied directly to the probabilities.
    #[default]
    Probability,
    /// Softmax over log-probabilities, i.e. scores normalised to sum to one
    /// at temperature 1.
    LogProbability,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PosteriorConfig {
    pub mode: PosteriorMode,
    pub temperature: f64,
}

impl Default for PosteriorConfig {
    fn default() -> Self {
        PosteriorConfig {
            mode: PosteriorMode::Probability,
            temperature: 1.0,
        }
    }
}

pub fn posterior(scores: &RelationScores, cfg: &PosteriorConfig) -> Result<Vec<f64>> {
    if cfg.temperature.is_nan() || cfg.temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be positive, got {}",
            cfg.temperature
        )));
    }
    if scores.scores.is_empty() || scores.scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!(
            "relation scores {:?} are not usable",
            scores.scores
        )));
    }
    let logits: Vec<f64> = match cfg.mode {
        PosteriorMode::Probability => scores.scores.iter().map(|s| s / cfg.temperature).collect(),
        PosteriorMode::LogProbability => scores
            .scores
            .iter()
            .map(|s| s.max(f64::MIN_POSITIVE).ln() / cfg.temperature)
            .collect(),
    };
    Ok(softmax(&logits))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub basis_order: Vec<String>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl AffineTransform {
    pub fn identity(basis_order: Vec<String>) -> Self {
        let n = basis_order.len();
        let a = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        AffineTransform {
            basis_order,
            a,
            b: vec![0.0; n],
            meta: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.basis_order.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if self.a.len() != n || self.a.iter().any(|r| r.len() != n) || self.b.len() != n {
            return Err(Error::shape("affine", format!("A and b must be {n}x{n} and {n}")));
        }
        if self.a.iter().flatten().chain(&self.b).any(|x| !x.is_finite()) {
            return Err(Error::Numeric("affine transform is not finite".into()));
        }
        Ok(())
    }

    pub fn order_digest(&self) -> String {
        order_digest(&self.basis_order)
    }

    /// Rejects a transform trained for a different basis or ordering.
    pub fn check_basis(&self, basis: &Basis) -> Result<()> {
        self.validate()?;
        if self.order_digest() != basis.digest() {
            return Err(Error::Contract(format!(
                "affine transform expects basis order {:?}, got {:?}",
                self.basis_order,
                basis.ids()
            )));
        }
        Ok(())
    }

    /// `w = A p + b`, unclamped.
    pub fn apply(&self, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != self.dim() {
            return Err(Error::shape(
                "affine",
                format!("input has {} entries, basis has {}", p.len(), self.dim()),
            ));
        }
        Ok(self
            .a
            .iter()
            .zip(&self.b)
            .map(|(row, b)| row.iter().zip(p).fold(0.0, |acc, (a, x)| acc + a * x) + b)
            .collect())
    }

    fn flat_a(&self) -> Vec<f64> {
        self.a.iter().flatten().copied().collect()
    }

    fn set_flat_a(&mut self, flat: &[f64]) {
        let n = self.dim();
        for (row, chunk) in self.a.iter_mut().zip(flat.chunks(n)) {
            row.copy_from_slice(chunk);
        }
    }
}

pub fn save_affine(t: &AffineTransform, path: impl AsRef<Path>) -> Result<()> {
    t.validate()?;
    let path = path.as_ref();
    std::fs::write(path, serde_json::to_string_pretty(t)?).map_err(|e| Error::io(path, e))
}

pub fn load_affine(path: impl AsRef<Path>) -> Result<AffineTransform> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let t: AffineTransform = serde_json::from_str(&text)?;
    t.validate()?;
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositeFv {
    pub fv: FunctionVector,
    pub weights: Vec<f64>,
    pub source: WordPair,
    pub basis_digest: String,
}

/// `sum_z w_z v_z`. Zero weights are skipped, so a one-hot weight vector
/// returns its basis vector bit for bit.
pub fn compose(basis: &Basis, weights: &[f64], source: &WordPair) -> Result<CompositeFv> {
    if weights.len() != basis.len() {
        return Err(Error::shape(
            "compose",
            format!("{} weights for {} basis vectors", weights.len(), basis.len()),
        ));
    }
    let mut acc: Option<Vec<f64>> = None;
    for (w, v) in weights.iter().zip(basis.vectors()) {
        if *w == 0.0 {
            continue;
        }
        match acc.as_mut() {
            None => acc = Some(v.vector.iter().map(|x| w * x).collect()),
            Some(a) => a.iter_mut().zip(&v.vector).for_each(|(a, x)| *a += w * x),
        }
    }
    let vector = acc.unwrap_or_else(|| vec![0.0; basis.dim()]);
    let relation = format!("{}:{}", source.input, source.output);
    let fv = FunctionVector::new(relation, basis.layer(), Provenance::Composite, vector)?;
    Ok(CompositeFv {
        fv,
        weights: weights.to_vec(),
        source: source.clone(),
        basis_digest: basis.digest(),
    })
}

/// Mixing weights for one source pair from its scores.
pub fn mixing_weights(
    scores: &RelationScores,
    affine: Option<&AffineTransform>,
    cfg: &PosteriorConfig,
) -> Result<Vec<f64>> {
    let p = posterior(scores, cfg)?;
    match affine {
        Some(g) => g.apply(&p),
        None => Ok(p),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalogyOutcome {
    pub top_k: Vec<u32>,
    pub hit: bool,
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Composite-vector answers for many problems: scores for every source,
/// then one batched read-out of the injected target prompts.
pub fn solve_analogies(
    model: &TransformerModel,
    template: &PromptTemplate,
    basis: &Basis,
    affine: Option<&AffineTransform>,
    cfg: &PosteriorConfig,
    problems: &[AnalogyProblem],
    k: usize,
) -> Result<Vec<AnalogyOutcome>> {
    if let Some(g) = affine {
        g.check_basis(basis)?;
    }
    for p in problems {
        p.validate()?;
    }
    let sources: Vec<WordPair> = problems
        .iter()
        .map(|p| WordPair::new(p.a.clone(), p.b.clone()))
        .collect();
    let scores = relation_scores_many(model, template, basis, &sources)?;
    let vocab = model.vocab();
    let mut targets = Vec::with_capacity(problems.len());
    let mut composites = Vec::with_capacity(problems.len());
    for ((p, s), src) in problems.iter().zip(&scores).zip(&sources) {
        targets.push(build_zero_shot_prompt(vocab, template, &p.c)?.tokens);
        let w = mixing_weights(s, affine, cfg)?;
        composites.push(compose(basis, &w, src)?);
    }
    let items: Vec<BatchItem> = targets
        .iter()
        .zip(&composites)
        .map(|(t, c)| BatchItem {
            tokens: t,
            interventions: vec![c.fv.intervention()],
        })
        .collect();
    let logits = model.final_logits(&items)?;
    problems
        .iter()
        .zip(logits)
        .zip(scores)
        .zip(composites)
        .map(|(((p, l), s), c)| {
            let gold = vocab.first_token(&p.d)?;
            let top: Vec<u32> = top_k(&l, k).into_iter().map(|i| i as u32).collect();
            Ok(AnalogyOutcome {
                hit: top.contains(&gold),
                top_k: top,
                scores: s.scores,
                weights: c.weights,
            })
        })
        .collect()
}

pub fn solve_analogy(
    model: &TransformerModel,
    template: &PromptTemplate,
    basis: &Basis,
    affine: Option<&AffineTransform>,
    cfg: &PosteriorConfig,
    problem: &AnalogyProblem,
    k: usize,
) -> Result<AnalogyOutcome> {
    Ok(solve_analogies(model, template, basis, affine, cfg, std::slice::from_ref(problem), k)?.remove(0))
}

/// `context` source pairs times `targets` target pairs per relation, drawn
/// without overlap from each split.
pub fn build_training_analogies(
    splits: &[&RelationDataset],
    context: usize,
    targets: usize,
    seed: u64,
) -> Result<Vec<AnalogyProblem>> {
    let mut out = Vec::new();
    for s in splits {
        if s.len() < context + targets {
            return Err(Error::Data(format!(
                "relation {:?} has {} pairs, {} needed for analogies",
                s.relation_id,
                s.len(),
                context + targets
            )));
        }
        let mut rng = seeded(seed, &["analogies", &s.relation_id]);
        let picked: Vec<&WordPair> = s.pairs.choose_multiple(&mut rng, context + targets).collect();
        let (src, tgt) = picked.split_at(context);
        for a in src {
            for c in tgt {
                out.push(AnalogyProblem::new(
                    &a.input,
                    &a.output,
                    &c.input,
                    &c.output,
                    Some(&s.relation_id),
                ));
            }
        }
    }
    Ok(out)
}

/// A training analogy with its posterior precomputed; the posterior does
/// not depend on the affine parameters.
#[derive(Clone, Debug)]
pub struct PreparedAnalogy {
    pub posterior: Vec<f64>,
    pub target: Vec<u32>,
    pub gold: usize,
}

pub fn prepare_analogies(
    model: &TransformerModel,
    template: &PromptTemplate,
    basis: &Basis,
    problems: &[AnalogyProblem],
    cfg: &PosteriorConfig,
) -> Result<Vec<PreparedAnalogy>> {
    let sources: Vec<WordPair> = problems
        .iter()
        .map(|p| WordPair::new(p.a.clone(), p.b.clone()))
        .collect();
    let scores = relation_scores_many(model, template, basis, &sources)?;
    let vocab = model.vocab();
    problems
        .iter()
        .zip(&scores)
        .map(|(p, s)| {
            Ok(PreparedAnalogy {
                posterior: posterior(s, cfg)?,
                target: build_zero_shot_prompt(vocab, template, &p.c)?.tokens,
                gold: vocab.first_token(&p.d)? as usize,
            })
        })
        .collect()
}

/// Mean over the batch of `CE + lambda * ||v_C||` and its gradients with
/// respect to `A` (row-major) and `b`.
pub fn affine_loss(
    model: &TransformerModel,
    basis: &Basis,
    affine: &AffineTransform,
    batch: &[PreparedAnalogy],
    lambda: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    affine.check_basis(basis)?;
    if batch.is_empty() {
        return Err(Error::Contract("empty analogy batch".into()));
    }
    let z = basis.len();
    let basis_matrix = basis.matrix();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let a = tape.leaf(Tensor::matrix(z, z, affine.flat_a())?);
    let b = tape.leaf(Tensor::row_vector(affine.b.clone()));
    let v = tape.constant(&basis_matrix);
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in batch.iter().enumerate() {
        if p.posterior.len() != z {
            return Err(Error::shape("affine_loss", "posterior does not match the basis"));
        }
        groups.entry(p.target.len()).or_default().push(i);
    }
    let mut terms = Vec::with_capacity(batch.len());
    for (len, idxs) in &groups {
        let mut patches = Vec::with_capacity(idxs.len());
        let mut vcs = Vec::with_capacity(idxs.len());
        for (s, &i) in idxs.iter().enumerate() {
            let p = tape.constant_owned(Tensor::row_vector(batch[i].posterior.clone()));
            let w = tape.matmul_nt(p, a)?;
            let w = tape.add(w, b)?;
            let vc = tape.matmul(w, v)?;
            vcs.push(vc);
            patches.push(TapePatch {
                row: s * len + len - 1,
                layer: basis.layer(),
                mode: Mode::Add,
                scope: Scope::Residual,
                vector: vc,
            });
        }
        let seqs: Vec<&[u32]> = idxs.iter().map(|&i| batch[i].target.as_slice()).collect();
        let trace = run(&mut tape, model.config(), &bound, &seqs, &patches)?;
        for (s, &i) in idxs.iter().enumerate() {
            let logits = logits_at(&mut tape, &bound, &trace, &[s * len + len - 1])?;
            let ce = tape.cross_entropy(logits, &[Some(batch[i].gold)])?;
            let n = tape.l2_norm(vcs[s])?;
            let reg = tape.scale(n, lambda)?;
            terms.push(tape.add(ce, reg)?);
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let loss = tape.scale(total, 1.0 / batch.len() as f64)?;
    tape.backward(loss)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("affine loss is {value}")));
    }
    let ga = tape.grad(a).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; z * z]);
    let gb = tape.grad(b).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; z]);
    Ok((value, ga, gb))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffineTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub lambda: f64,
    pub batch_size: usize,
    pub context_pairs: usize,
    pub target_pairs: usize,
    pub seed: u64,
    pub posterior: PosteriorConfig,
}

impl Default for AffineTrainConfig {
    fn default() -> Self {
        AffineTrainConfig {
            lr: 0.01,
            epochs: 5,
            lambda: 0.01,
            batch_size: 8,
            context_pairs: 5,
            target_pairs: 5,
            seed: 0,
            posterior: PosteriorConfig::default(),
        }
    }
}

/// Trains `A` and `b` from identity and zero. Returns the transform and
/// the per-step losses.
pub fn train_affine(
    model: &TransformerModel,
    template: &PromptTemplate,
    basis: &Basis,
    problems: &[AnalogyProblem],
    cfg: &AffineTrainConfig,
) -> Result<(AffineTransform, Vec<f64>)> {
    if problems.is_empty() {
        return Err(Error::Data("no training analogies".into()));
    }
    if cfg.lr.is_nan() || cfg.lr < 0.0 || cfg.batch_size == 0 || cfg.lambda.is_nan() || cfg.lambda < 0.0 {
        return Err(Error::Config(
            "affine training needs lr >= 0, lambda >= 0, batch_size >= 1".into(),
        ));
    }
    let prepared = prepare_analogies(model, template, basis, problems, &cfg.posterior)?;
    let z = basis.len();
    let mut g = AffineTransform::identity(basis.ids());
    let mut opt = AdamW::new(
        OptimizerConfig {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
        &[z * z, z],
    );
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seeded(cfg.seed, &["affine", &epoch.to_string()]));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PreparedAnalogy> = chunk.iter().map(|&i| prepared[i].clone()).collect();
            let (loss, ga, gb) = affine_loss(model, basis, &g, &batch, cfg.lambda)?;
            let mut a = g.flat_a();
            opt.step(
                &mut [a.as_mut_slice(), g.b.as_mut_slice()],
                &[ga.as_slice(), gb.as_slice()],
            )?;
            g.set_flat_a(&a);
            losses.push(loss);
        }
        log::debug!(
            "affine epoch {epoch}: mean loss {:.4}",
            losses
                .iter()
                .rev()
                .take(order.len().div_ceil(cfg.batch_size))
                .sum::<f64>()
                / order.len().div_ceil(cfg.batch_size) as f64
        );
    }
    g.validate()?;
    g.meta.insert("config".into(), serde_json::to_value(cfg)?);
    g.meta.insert("n_problems".into(), problems.len().into());
    Ok((g, losses))
}
