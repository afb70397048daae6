//! Evaluation protocols: shuffled-label and zero-shot accuracy, one-shot
//! analogies, representational similarity, and the decoding probe.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cfv::{solve_analogies, AffineTransform, Basis, PosteriorConfig};
use crate::data::similarity::matrix_to_csv;
use crate::data::{AnalogyProblem, HumanSimilarityMatrix, RelationDataset, WordPair};
use crate::error::{Error, Result};
use crate::fv::FunctionVector;
use crate::model::{BatchItem, InterventionSpec, TransformerModel};
use crate::prompts::{
    build_analogy_prompt, build_blank_pair_prompt, build_icl_prompt, build_shuffled_prompt, build_zero_shot_prompt,
    PromptTemplate,
};
use crate::rng::seeded;
use crate::tensor::{dot, softmax, top_k};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    ShuffledLabel,
    ZeroShot,
    OneShotAnalogy,
    Rsa,
    Decode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    Baseline,
    InitialFv,
    Ffv,
    Cfv,
    CfvAffine,
    Actadd,
    MeanCentered,
}

impl Condition {
    pub const ALL: [Condition; 7] = [
        Condition::Baseline,
        Condition::InitialFv,
        Condition::Ffv,
        Condition::Cfv,
        Condition::CfvAffine,
        Condition::Actadd,
        Condition::MeanCentered,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Baseline => "baseline",
            Condition::InitialFv => "initial-fv",
            Condition::Ffv => "ffv",
            Condition::Cfv => "cfv",
            Condition::CfvAffine => "cfv-affine",
            Condition::Actadd => "actadd",
            Condition::MeanCentered => "mean-centered",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown condition {s:?}")))
    }
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::ShuffledLabel => "shuffled-label",
            TaskKind::ZeroShot => "zero-shot",
            TaskKind::OneShotAnalogy => "one-shot-analogy",
            TaskKind::Rsa => "rsa",
            TaskKind::Decode => "decode",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub prompt_digest: String,
    pub gold: String,
    pub top_k: Vec<String>,
    pub hit: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub condition: Condition,
    pub relation: Option<String>,
    pub k: usize,
    pub items: Vec<ItemRecord>,
    pub accuracy: f64,
    pub seed: u64,
    pub config_digest: String,
}

impl EvalReport {
    fn new(
        ctx: &EvalContext,
        task: TaskKind,
        condition: Condition,
        relation: Option<&str>,
        k: usize,
        items: Vec<ItemRecord>,
    ) -> Self {
        let hits = items.iter().filter(|i| i.hit).count();
        EvalReport {
            task,
            condition,
            relation: relation.map(Into::into),
            k,
            accuracy: hits as f64 / items.len().max(1) as f64,
            items,
            seed: ctx.seed,
            config_digest: ctx.config_digest.to_string(),
        }
    }

    pub fn hits(&self) -> usize {
        self.items.iter().filter(|i| i.hit).count()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// What every evaluation needs besides its inputs.
#[derive(Clone, Copy, Debug)]
pub struct EvalContext<'m> {
    pub model: &'m TransformerModel,
    pub template: &'m PromptTemplate,
    pub seed: u64,
    pub config_digest: &'m str,
}

impl<'m> EvalContext<'m> {
    pub fn new(model: &'m TransformerModel, template: &'m PromptTemplate, seed: u64, config_digest: &'m str) -> Self {
        EvalContext {
            model,
            template,
            seed,
            config_digest,
        }
    }
}

/// First 16 hex digits of the SHA-256 of the token ids.
pub fn prompt_digest(tokens: &[u32]) -> String {
    let mut h = Sha256::new();
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

struct Scored {
    tokens: Vec<u32>,
    gold: String,
    interventions: Vec<InterventionSpec>,
}

fn score(model: &TransformerModel, items: &[Scored], k: usize) -> Result<Vec<ItemRecord>> {
    let vocab = model.vocab();
    let batch: Vec<BatchItem> = items
        .iter()
        .map(|s| BatchItem {
            tokens: &s.tokens,
            interventions: s.interventions.clone(),
        })
        .collect();
    let logits = model.final_logits(&batch)?;
    items
        .iter()
        .zip(logits)
        .map(|(s, l)| {
            let gold = vocab.first_token(&s.gold)?;
            let top = top_k(&l, k);
            Ok(ItemRecord {
                prompt_digest: prompt_digest(&s.tokens),
                gold: s.gold.clone(),
                hit: top.contains(&(gold as usize)),
                top_k: top.iter().map(|&t| vocab.token(t as u32).to_string()).collect(),
            })
        })
        .collect()
}

fn interventions(fv: Option<&FunctionVector>) -> Vec<InterventionSpec> {
    fv.map(|v| vec![v.intervention()]).unwrap_or_default()
}

/// Top-k accuracy on zero-shot prompts for every test pair.
pub fn eval_zero_shot(
    ctx: &EvalContext,
    test: &RelationDataset,
    fv: Option<&FunctionVector>,
    condition: Condition,
    k: usize,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Data(format!("test split for {:?} is empty", test.relation_id)));
    }
    let items = test
        .pairs
        .iter()
        .map(|p| {
            Ok(Scored {
                tokens: build_zero_shot_prompt(ctx.model.vocab(), ctx.template, &p.input)?.tokens,
                gold: p.output.clone(),
                interventions: interventions(fv),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let records = score(ctx.model, &items, k)?;
    Ok(EvalReport::new(
        ctx,
        TaskKind::ZeroShot,
        condition,
        Some(&test.relation_id),
        k,
        records,
    ))
}

/// Top-1 accuracy on `shots`-shot prompts with deranged demonstration
/// outputs. Demonstrations come from `demo_pool` and never include the
/// query's input. Prompts depend only on the seed and the relation, so every
/// condition sees the same prompts.
pub fn eval_shuffled_label(
    ctx: &EvalContext,
    test: &RelationDataset,
    demo_pool: &RelationDataset,
    shots: usize,
    fv: Option<&FunctionVector>,
    condition: Condition,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Data(format!("test split for {:?} is empty", test.relation_id)));
    }
    let mut rng = seeded(ctx.seed, &["shuffled-eval", &test.relation_id]);
    let items = test
        .pairs
        .iter()
        .map(|q| {
            let pool: Vec<&WordPair> = demo_pool.pairs.iter().filter(|p| p.input != q.input).collect();
            if pool.len() < shots || shots < 2 {
                return Err(Error::Data(format!(
                    "relation {:?}: {} demonstration pairs for {shots}-shot shuffled prompts",
                    test.relation_id,
                    pool.len()
                )));
            }
            let demos: Vec<WordPair> = pool.choose_multiple(&mut rng, shots).map(|p| (*p).clone()).collect();
            let prompt = build_shuffled_prompt(
                ctx.model.vocab(),
                ctx.template,
                &demos,
                &q.input,
                rng.next_u64(),
                Some(&test.relation_id),
            )?;
            Ok(Scored {
                tokens: prompt.tokens,
                gold: q.output.clone(),
                interventions: interventions(fv),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let records = score(ctx.model, &items, 1)?;
    Ok(EvalReport::new(
        ctx,
        TaskKind::ShuffledLabel,
        condition,
        Some(&test.relation_id),
        1,
        records,
    ))
}

/// How one-shot analogies are answered.
#[derive(Clone, Copy, Debug)]
pub enum AnalogyMethod<'b> {
    /// The textual prompt `a : b :: c :`.
    Textual,
    /// The source pair as a single Q/A demonstration before the target query.
    Demonstration,
    /// A composite vector injected into the target's zero-shot prompt.
    Composite {
        basis: &'b Basis,
        affine: Option<&'b AffineTransform>,
        posterior: &'b PosteriorConfig,
    },
}

pub fn eval_one_shot_analogy(
    ctx: &EvalContext,
    problems: &[AnalogyProblem],
    method: AnalogyMethod<'_>,
    condition: Condition,
    k: usize,
) -> Result<EvalReport> {
    if problems.is_empty() {
        return Err(Error::Data("no analogy problems".into()));
    }
    let vocab = ctx.model.vocab();
    let records = match method {
        AnalogyMethod::Textual => {
            let items = problems
                .iter()
                .map(|p| {
                    Ok(Scored {
                        tokens: build_analogy_prompt(vocab, ctx.template, p)?.full.tokens,
                        gold: p.d.clone(),
                        interventions: Vec::new(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            score(ctx.model, &items, k)?
        }
        AnalogyMethod::Demonstration => {
            let items = problems
                .iter()
                .map(|p| {
                    let demo = [WordPair::new(p.a.as_str(), p.b.as_str())];
                    Ok(Scored {
                        tokens: build_icl_prompt(vocab, ctx.template, &demo, &p.c, None)?.tokens,
                        gold: p.d.clone(),
                        interventions: Vec::new(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            score(ctx.model, &items, k)?
        }
        AnalogyMethod::Composite {
            basis,
            affine,
            posterior,
        } => composite_records(ctx, problems, basis, affine, posterior, k)?,
    };
    Ok(EvalReport::new(
        ctx,
        TaskKind::OneShotAnalogy,
        condition,
        None,
        k,
        records,
    ))
}

fn composite_records(
    ctx: &EvalContext,
    problems: &[AnalogyProblem],
    basis: &Basis,
    affine: Option<&AffineTransform>,
    posterior: &PosteriorConfig,
    k: usize,
) -> Result<Vec<ItemRecord>> {
    let vocab = ctx.model.vocab();
    let outcomes = solve_analogies(ctx.model, ctx.template, basis, affine, posterior, problems, k)?;
    problems
        .iter()
        .zip(outcomes)
        .map(|(p, o)| {
            Ok(ItemRecord {
                prompt_digest: prompt_digest(&build_zero_shot_prompt(vocab, ctx.template, &p.c)?.tokens),
                gold: p.d.clone(),
                top_k: o.top_k.iter().map(|&t| vocab.token(t).to_string()).collect(),
                hit: o.hit,
            })
        })
        .collect()
}

/// Zero-shot accuracy where each test query gets a composite vector built
/// from one source pair of the same relation, drawn from `sources`.
#[allow(clippy::too_many_arguments)]
pub fn eval_zero_shot_composite(
    ctx: &EvalContext,
    test: &RelationDataset,
    sources: &RelationDataset,
    basis: &Basis,
    affine: Option<&AffineTransform>,
    posterior: &PosteriorConfig,
    condition: Condition,
    k: usize,
) -> Result<EvalReport> {
    if test.is_empty() || sources.is_empty() {
        return Err(Error::Data(format!(
            "relation {:?} needs test and source pairs",
            test.relation_id
        )));
    }
    let mut rng = seeded(ctx.seed, &["composite-source", &test.relation_id]);
    let problems = test
        .pairs
        .iter()
        .map(|q| {
            let pool: Vec<&WordPair> = sources.pairs.iter().filter(|p| p.input != q.input).collect();
            let s = pool
                .choose(&mut rng)
                .ok_or_else(|| Error::Data(format!("no source pair for query {:?}", q.input)))?;
            Ok(AnalogyProblem::new(
                &s.input,
                &s.output,
                &q.input,
                &q.output,
                Some(&test.relation_id),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let records = composite_records(ctx, &problems, basis, affine, posterior, k)?;
    Ok(EvalReport::new(
        ctx,
        TaskKind::ZeroShot,
        condition,
        Some(&test.relation_id),
        k,
        records,
    ))
}

/// Zero-shot top-1 accuracy with `vector` added at `layer`.
pub fn injected_top1_accuracy(
    model: &TransformerModel,
    template: &PromptTemplate,
    pairs: &[WordPair],
    vector: &[f64],
    layer: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("accuracy over zero pairs".into()));
    }
    let items = pairs
        .iter()
        .map(|p| {
            Ok(Scored {
                tokens: build_zero_shot_prompt(model.vocab(), template, &p.input)?.tokens,
                gold: p.output.clone(),
                interventions: vec![InterventionSpec::add(layer, vector.to_vec())],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let records = score(model, &items, 1)?;
    Ok(records.iter().filter(|r| r.hit).count() as f64 / records.len() as f64)
}

/// Top-1 accuracy on intact `shots`-shot prompts, one per test pair, with
/// demonstrations drawn from `demo_pool` excluding the query's input.
pub fn icl_accuracy(
    model: &TransformerModel,
    template: &PromptTemplate,
    test: &RelationDataset,
    demo_pool: &RelationDataset,
    shots: usize,
    seed: u64,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Data(format!("test split for {:?} is empty", test.relation_id)));
    }
    let mut rng = seeded(seed, &["icl-eval", &test.relation_id]);
    let items = test
        .pairs
        .iter()
        .map(|q| {
            let pool: Vec<&WordPair> = demo_pool.pairs.iter().filter(|p| p.input != q.input).collect();
            if pool.len() < shots {
                return Err(Error::Data(format!(
                    "relation {:?}: {} demonstration pairs for {shots}-shot prompts",
                    test.relation_id,
                    pool.len()
                )));
            }
            let demos: Vec<WordPair> = pool.choose_multiple(&mut rng, shots).map(|p| (*p).clone()).collect();
            Ok(Scored {
                tokens: build_icl_prompt(model.vocab(), template, &demos, &q.input, None)?.tokens,
                gold: q.output.clone(),
                interventions: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let records = score(model, &items, 1)?;
    Ok(records.iter().filter(|r| r.hit).count() as f64 / records.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// `1 - cosine similarity`.
    #[default]
    Cosine,
    /// `1 - Pearson correlation` of the two activation vectors.
    Correlation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DissimilarityMatrix {
    pub labels: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub metric: Metric,
}

impl DissimilarityMatrix {
    pub fn from_features(labels: Vec<String>, features: &[Vec<f64>], metric: Metric) -> Result<Self> {
        if labels.len() != features.len() || labels.len() < 2 {
            return Err(Error::Contract("need at least two labelled feature vectors".into()));
        }
        let prepared: Vec<Vec<f64>> = features
            .iter()
            .map(|f| match metric {
                Metric::Cosine => f.clone(),
                Metric::Correlation => {
                    let m = f.iter().sum::<f64>() / f.len() as f64;
                    f.iter().map(|x| x - m).collect()
                }
            })
            .collect();
        let norms: Vec<f64> = prepared.iter().map(|f| dot(f, f).sqrt()).collect();
        if let Some(i) = norms.iter().position(|&n| n == 0.0) {
            return Err(Error::Numeric(format!("activation for {:?} has zero norm", labels[i])));
        }
        let n = labels.len();
        let mut matrix = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                let cos = (dot(&prepared[i], &prepared[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
                matrix[i][j] = 1.0 - cos;
                matrix[j][i] = 1.0 - cos;
            }
        }
        Ok(DissimilarityMatrix { labels, matrix, metric })
    }

    pub fn upper_triangle(&self) -> Vec<f64> {
        upper_triangle(&self.matrix)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        matrix_to_csv(&self.labels, &self.matrix)
    }

    /// Mean dissimilarity of label pairs in the same group and in different
    /// groups.
    pub fn within_between(&self, groups: &[String]) -> Result<(f64, f64)> {
        if groups.len() != self.labels.len() {
            return Err(Error::Contract("one group per label".into()));
        }
        let (mut w, mut nw, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..groups.len() {
            for j in i + 1..groups.len() {
                if groups[i] == groups[j] {
                    w += self.matrix[i][j];
                    nw += 1;
                } else {
                    b += self.matrix[i][j];
                    nb += 1;
                }
            }
        }
        if nw == 0 || nb == 0 {
            return Err(Error::Contract("need both within- and between-group pairs".into()));
        }
        Ok((w / nw as f64, b / nb as f64))
    }
}

pub fn upper_triangle(m: &[Vec<f64>]) -> Vec<f64> {
    (0..m.len())
        .flat_map(|i| (i + 1..m.len()).map(move |j| (i, j)))
        .map(|(i, j)| m[i][j])
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Contract(
            "pearson needs two equal-length samples of size >= 2".into(),
        ));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Numeric("pearson of a constant sample".into()));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// 95% interval for a correlation over `n` samples via the Fisher z
/// transform. Needs `n > 3`.
pub fn fisher_ci(r: f64, n: usize) -> Result<(f64, f64)> {
    if n <= 3 {
        return Err(Error::Contract(format!(
            "Fisher interval needs more than 3 samples, got {n}"
        )));
    }
    let z = r.clamp(-1.0 + 1e-15, 1.0 - 1e-15).atanh();
    let se = 1.0 / ((n - 3) as f64).sqrt();
    Ok(((z - 1.959963984540054 * se).tanh(), (z + 1.959963984540054 * se).tanh()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RsaResult {
    pub model: DissimilarityMatrix,
    pub r: f64,
    pub ci: Option<(f64, f64)>,
    pub n_cells: usize,
}

/// Concatenated head contributions of layer `read_layer` at the final colon
/// of each pair's blank prompt, with optional per-pair add-mode injections.
pub fn rsa_activations(
    model: &TransformerModel,
    template: &PromptTemplate,
    pairs: &[WordPair],
    injections: &[Option<&FunctionVector>],
    read_layer: usize,
) -> Result<Vec<Vec<f64>>> {
    let cfg = model.config();
    if read_layer >= cfg.n_layers {
        return Err(Error::Contract(format!(
            "read layer {read_layer} >= n_layers {}",
            cfg.n_layers
        )));
    }
    if injections.len() != pairs.len() {
        return Err(Error::Contract("one injection slot per pair".into()));
    }
    let prompts = pairs
        .iter()
        .map(|p| Ok(build_blank_pair_prompt(model.vocab(), template, p)?.tokens))
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<BatchItem> = prompts
        .iter()
        .zip(injections)
        .map(|(t, fv)| BatchItem {
            tokens: t,
            interventions: interventions(*fv),
        })
        .collect();
    let readouts = model.final_readouts(&items, true)?;
    Ok(readouts
        .iter()
        .map(|r| {
            (0..cfg.n_heads)
                .flat_map(|j| r.head(cfg, read_layer, j).to_vec())
                .collect()
        })
        .collect())
}

/// Model dissimilarities for `pairs` against a human matrix with the same
/// labels (`"input:output"`), correlated over the strict upper triangle.
pub fn rsa_similarity(
    model: &TransformerModel,
    template: &PromptTemplate,
    pairs: &[WordPair],
    injections: &[Option<&FunctionVector>],
    read_layer: usize,
    human: &HumanSimilarityMatrix,
    metric: Metric,
) -> Result<RsaResult> {
    let labels: Vec<String> = pairs.iter().map(|p| format!("{}:{}", p.input, p.output)).collect();
    if labels != human.labels {
        return Err(Error::Data(format!(
            "pair labels {:?} do not match the human matrix labels {:?}",
            labels, human.labels
        )));
    }
    let feats = rsa_activations(model, template, pairs, injections, read_layer)?;
    let dm = DissimilarityMatrix::from_features(labels, &feats, metric)?;
    let human_upper = upper_triangle(&human.matrix);
    let r = pearson(&dm.upper_triangle(), &human_upper)?;
    let n = human_upper.len();
    Ok(RsaResult {
        model: dm,
        r,
        ci: fisher_ci(r, n).ok(),
        n_cells: n,
    })
}

/// Top-k tokens after adding `fv` to the blank prompt's hidden state at the
/// vector's layer and running the remaining layers.
pub fn decode_probe(
    model: &TransformerModel,
    template: &PromptTemplate,
    fv: &FunctionVector,
    k: usize,
) -> Result<Vec<(String, f64)>> {
    let cfg = model.config();
    if fv.vector.len() != cfg.d_model {
        return Err(Error::shape("decode_probe", "vector width differs from d_model"));
    }
    let blank = build_zero_shot_prompt(model.vocab(), template, "")?.tokens;
    let item = BatchItem {
        tokens: &blank,
        interventions: Vec::new(),
    };
    let r = model.final_readouts(std::slice::from_ref(&item), true)?.remove(0);
    let hidden: Vec<f64> = r
        .hidden(cfg, fv.layer)
        .iter()
        .zip(&fv.vector)
        .map(|(h, v)| h + v)
        .collect();
    let dist = model.decode_from_layer(&hidden, fv.layer + 1)?;
    Ok(top_k(&dist, k)
        .into_iter()
        .map(|t| (model.vocab().token(t as u32).to_string(), dist[t]))
        .collect())
}

/// Rows are conditions, columns tasks, cells mean accuracy over the reports
/// for that pair.
pub fn summary_csv(reports: &[EvalReport]) -> Result<String> {
    let mut cells: BTreeMap<(Condition, TaskKind), Vec<f64>> = BTreeMap::new();
    for r in reports {
        cells.entry((r.condition, r.task)).or_default().push(r.accuracy);
    }
    let tasks: Vec<TaskKind> = {
        let mut t: Vec<TaskKind> = cells.keys().map(|(_, t)| *t).collect();
        t.sort();
        t.dedup();
        t
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["condition".to_string()];
    header.extend(tasks.iter().map(|t| t.name().to_string()));
    w.write_record(&header)?;
    let mut conds: Vec<Condition> = cells.keys().map(|(c, _)| *c).collect();
    conds.dedup();
    for c in conds {
        let mut row = vec![c.name().to_string()];
        for t in &tasks {
            row.push(match cells.get(&(c, *t)) {
                Some(v) => format!("{:.6}", v.iter().sum::<f64>() / v.len() as f64),
                None => String::new(),
            });
        }
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

/// Next-token distribution at the final token of `tokens` (convenience for
/// probes and tests).
pub fn final_distribution(model: &TransformerModel, tokens: &[u32], fv: Option<&FunctionVector>) -> Result<Vec<f64>> {
    let item = BatchItem {
        tokens,
        interventions: interventions(fv),
    };
    Ok(softmax(&model.final_logits(std::slice::from_ref(&item))?.remove(0)))
}

#[cfg(test)]
mod tests;
