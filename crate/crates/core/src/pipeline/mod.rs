//! The commands behind the `fvlab` binary. Every command reads a
//! [`RunConfig`], consumes upstream artifacts by path, writes under the run
//! directory and records each file with its hash in the run manifest.
//!
//! Layout of a run directory:
//!
//! ```text
//! manifest.json
//! model/{checkpoint,pretrain_log,splits}.json
//! seed-N/fv/{initial,actadd,mean-centered}/<relation>.json, fv/extraction.json
//! seed-N/ffv/<relation>.json, ffv/traces.json (ffv-random/ for the control)
//! seed-N/cfv/{affine,train}.json
//! seed-N/eval/<task>/<condition>--<relation>.json, eval/{summary.csv,absent.json}
//! seed-N/rsa/*.csv, rsa/results.json
//! seed-N/decode/decode.json
//! seed-N/layer_sweep.csv
//! ```

mod config;
mod manifest;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

pub use config::{DataSection, DecodeSection, EvalSection, ModelSection, RsaSection, RunConfig, SweepSection};
pub use manifest::{sha256_file, ManifestEntry, RunManifest, MANIFEST_FILE};
pub use report::{report, ReportRow, SummaryRow};

use crate::cfv::{build_training_analogies, load_affine, save_affine, train_affine, Basis, PosteriorConfig};
use crate::data::{
    generate_synthetic_relations, load_analogy_file, load_human_similarity_matrix, load_relation_file, split_relation,
    AnalogyProblem, HumanSimilarityMatrix, RelationDataset, RelationSplits, TrainingSequence, Vocabulary, WordPair,
};
use crate::error::{Error, Result};
use crate::eval::{
    decode_probe, eval_one_shot_analogy, eval_shuffled_label, eval_zero_shot, eval_zero_shot_composite,
    injected_top1_accuracy, rsa_similarity, summary_csv, AnalogyMethod, Condition, EvalContext, EvalReport, TaskKind,
};
use crate::finetune::{batch_finetune_all, FineTuneConfig, FineTuneTrace, InitMode};
use crate::fv::{
    actadd_vector, corpus_mean_hidden, extract_function_vectors, load_function_vector, mean_center,
    save_function_vector, CieTable, FunctionVector, HeadSet,
};
use crate::model::{load_checkpoint, pretrain as train_model, save_checkpoint, TransformerModel};
use crate::prompts::build_zero_shot_prompt;
use crate::rng::seeded;

/// Relations, splits and corpus of a run. Rebuilt from the config by every
/// command; `model/splits.json` records them.
pub struct World {
    pub vocab: Vocabulary,
    pub splits: Vec<RelationSplits>,
    pub corpus: Vec<TrainingSequence>,
    /// Relations whose extract split is in the pretraining corpus.
    pub trained: BTreeSet<String>,
}

impl World {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let bundle = generate_synthetic_relations(cfg.model.seed, &cfg.data.synthetic)?;
        let trained = bundle.splits.iter().map(|s| s.extract.relation_id.clone()).collect();
        let mut splits = bundle.splits;
        for path in &cfg.data.relation_files {
            let ds = load_relation_file(path)?;
            if splits.iter().any(|s| s.extract.relation_id == ds.relation_id) {
                return Err(Error::Config(format!("relation {:?} is defined twice", ds.relation_id)));
            }
            for p in &ds.pairs {
                build_zero_shot_prompt(&bundle.vocab, &cfg.prompt, &p.input)?;
                bundle.vocab.first_token(&p.output)?;
            }
            splits.push(split_relation(&ds, &cfg.data.synthetic.split)?);
        }
        Ok(World {
            vocab: bundle.vocab,
            splits,
            corpus: bundle.corpus,
            trained,
        })
    }

    pub fn relation_ids(&self) -> Vec<String> {
        self.splits.iter().map(|s| s.extract.relation_id.clone()).collect()
    }

    fn part(&self, f: impl Fn(&RelationSplits) -> &RelationDataset) -> Vec<&RelationDataset> {
        self.splits.iter().map(f).collect()
    }
}

/// An opened run directory.
pub struct Run {
    pub cfg: RunConfig,
    pub root: PathBuf,
    pub manifest: RunManifest,
    pub world: World,
}

pub fn seed_dir(seed: u64) -> String {
    format!("seed-{seed}")
}

fn file_name(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

impl Run {
    pub fn open(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let root = cfg.out_dir.clone();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let manifest = RunManifest::open(&root, &cfg)?;
        let world = World::build(&cfg)?;
        Ok(Run {
            cfg,
            root,
            manifest,
            world,
        })
    }

    fn write_bytes(&mut self, rel: &str, bytes: &[u8], command: &str, seed: Option<u64>) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.manifest.record(&self.root, rel, command, seed)
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T, command: &str, seed: Option<u64>) -> Result<()> {
        self.write_bytes(rel, serde_json::to_string_pretty(value)?.as_bytes(), command, seed)
    }

    fn write_fv(&mut self, rel: &str, fv: &FunctionVector, command: &str, seed: u64) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        save_function_vector(fv, &path)?;
        self.manifest.record(&self.root, rel, command, Some(seed))
    }

    /// Path of an upstream artifact that this run's manifest lists.
    fn require(&self, rel: &str, producer: &str) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if !path.exists() || !self.manifest.contains(rel) {
            return Err(Error::MissingArtifact {
                path,
                producer: producer.to_string(),
            });
        }
        Ok(path)
    }

    fn available(&self, rel: &str) -> bool {
        self.manifest.contains(rel) && self.root.join(rel).exists()
    }

    pub fn save_manifest(&self) -> Result<()> {
        self.manifest.save(&self.root)
    }

    fn checkpoint_rel() -> &'static str {
        "model/checkpoint.json"
    }

    /// Loads the frozen model and checks it against the run's recorded
    /// weight digest.
    pub fn model(&mut self) -> Result<TransformerModel> {
        let model = match &self.cfg.model.checkpoint {
            Some(p) => load_checkpoint(p)?,
            None => load_checkpoint(self.require(Self::checkpoint_rel(), "pretrain")?)?,
        };
        if model.vocab().tokens() != self.world.vocab.tokens() {
            return Err(Error::Config(
                "checkpoint vocabulary differs from the configured world".into(),
            ));
        }
        self.manifest.check_weights(&model.weights_digest())?;
        Ok(model)
    }

    fn verify_frozen(&mut self, model: &TransformerModel) -> Result<()> {
        self.manifest.check_weights(&model.weights_digest())?;
        self.save_manifest()
    }

    fn vectors(&self, seed: u64, kind: &str, producer: &str) -> Result<Vec<FunctionVector>> {
        self.world
            .relation_ids()
            .iter()
            .map(|id| {
                load_function_vector(
                    self.require(&format!("{}/{kind}/{}.json", seed_dir(seed), file_name(id)), producer)?,
                )
            })
            .collect()
    }
}

#[derive(Serialize)]
struct PretrainLogFile<'a> {
    steps: usize,
    losses: &'a [f64],
    tail_loss: f64,
}

/// Trains the model on the synthetic corpus and writes the checkpoint.
pub fn cmd_pretrain(run: &mut Run) -> Result<TransformerModel> {
    if let Some(p) = &run.cfg.model.checkpoint {
        return Err(Error::Config(format!(
            "model.checkpoint is set to {}; nothing to pretrain",
            p.display()
        )));
    }
    let config = run.cfg.model.model_config(run.world.vocab.len());
    let (model, log) = train_model(&run.world.corpus, run.world.vocab.clone(), config, &run.cfg.pretrain)?;
    log::info!(
        "pretraining took {:.1}s, tail loss {:.4}",
        log.seconds,
        log.tail_loss(50)
    );
    let rel = Run::checkpoint_rel();
    std::fs::create_dir_all(run.root.join("model")).map_err(|e| Error::io(run.root.join("model"), e))?;
    save_checkpoint(&model, run.root.join(rel))?;
    run.manifest.weights_digest = None;
    run.manifest.record(&run.root, rel, "pretrain", None)?;
    run.manifest.check_weights(&model.weights_digest())?;
    let file = PretrainLogFile {
        steps: log.losses.len(),
        losses: &log.losses,
        tail_loss: log.tail_loss(50),
    };
    run.write_json("model/pretrain_log.json", &file, "pretrain", None)?;
    let splits = run.world.splits.clone();
    run.write_json("model/splits.json", &splits, "pretrain", None)?;
    run.save_manifest()?;
    Ok(model)
}

#[derive(Serialize, Deserialize)]
pub struct ExtractionFile {
    pub layer: usize,
    pub heads: HeadSet,
    pub cie: Vec<CieTable>,
    /// Mean CIE over the selected heads, per relation.
    pub selected_mean_cie: BTreeMap<String, f64>,
}

/// Initial function vectors plus the ActAdd and mean-centred baselines.
pub fn cmd_extract(run: &mut Run, seed: u64) -> Result<()> {
    let model = run.model()?;
    let t = run.cfg.prompt.clone();
    let extract = run.world.part(|s| &s.extract);
    let ex = extract_function_vectors(&model, &t, &extract, &run.cfg.extract, seed)?;
    let layer = ex.vectors[0].layer;
    let dir = seed_dir(seed);

    let mut broad: Vec<Vec<u32>> = Vec::new();
    let mut seen = BTreeSet::new();
    for ds in &extract {
        for p in &ds.pairs {
            if seen.insert(p.input.clone()) {
                broad.push(build_zero_shot_prompt(model.vocab(), &t, &p.input)?.tokens);
            }
        }
    }
    let corpus_mean = corpus_mean_hidden(&model, &broad, layer)?;

    let mut actadd = Vec::with_capacity(extract.len());
    for ds in &extract {
        let mut rng = seeded(seed, &["actadd", &ds.relation_id]);
        let p = ds
            .pairs
            .choose(&mut rng)
            .ok_or_else(|| Error::Data(format!("relation {:?} has no extract pairs", ds.relation_id)))?;
        let (pos, a) = t.pair_tokens(model.vocab(), p)?;
        let (neg, b) = t.pair_tokens(model.vocab(), &WordPair::new(p.input.as_str(), p.input.as_str()))?;
        let v = actadd_vector(
            &model,
            &ds.relation_id,
            &pos[..=a],
            Some(&neg[..=b]),
            layer,
            run.cfg.eval.actadd_coefficient,
        )?;
        actadd.push(v.with_meta("source_pair", p));
    }

    let selected_mean_cie = ex
        .cie
        .iter()
        .map(|c| (c.relation.clone(), c.mean_over(&ex.heads)))
        .collect();
    let ids: Vec<String> = extract.iter().map(|d| d.relation_id.clone()).collect();
    for ((fv, aa), id) in ex.vectors.iter().zip(&actadd).zip(&ids) {
        let name = file_name(id);
        let fv = fv.clone().with_meta("seed", seed);
        run.write_fv(&format!("{dir}/fv/initial/{name}.json"), &fv, "extract", seed)?;
        run.write_fv(&format!("{dir}/fv/actadd/{name}.json"), aa, "extract", seed)?;
        let mc = mean_center(&fv, &corpus_mean)?;
        run.write_fv(&format!("{dir}/fv/mean-centered/{name}.json"), &mc, "extract", seed)?;
    }
    let file = ExtractionFile {
        layer,
        heads: ex.heads.clone(),
        cie: ex.cie.clone(),
        selected_mean_cie,
    };
    run.write_json(&format!("{dir}/fv/extraction.json"), &file, "extract", Some(seed))?;
    run.verify_frozen(&model)
}

fn finetune_into(
    run: &mut Run,
    model: &TransformerModel,
    seed: u64,
    inits: &[FunctionVector],
    cfg: &FineTuneConfig,
    kind: &str,
) -> Result<()> {
    let ft = run.world.part(|s| &s.finetune);
    let monitors = run.world.part(|s| &s.extract);
    let results = batch_finetune_all(model, &run.cfg.prompt, inits, &ft, Some(&monitors), cfg);
    let ids = run.world.relation_ids();
    let dir = seed_dir(seed);
    let mut traces: BTreeMap<String, FineTuneTrace> = BTreeMap::new();
    let mut first_err = None;
    for (id, r) in ids.iter().zip(results) {
        match r {
            Ok((fv, trace)) => {
                run.write_fv(&format!("{dir}/{kind}/{}.json", file_name(id)), &fv, "finetune", seed)?;
                traces.insert(id.clone(), trace);
            }
            Err(e) => {
                log::error!("fine-tuning {id} failed: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    run.write_json(&format!("{dir}/{kind}/traces.json"), &traces, "finetune", Some(seed))?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Fine-tunes every initial vector on its relation's fine-tuning split.
pub fn cmd_finetune(run: &mut Run, seed: u64) -> Result<()> {
    let model = run.model()?;
    let inits = run.vectors(seed, "fv/initial", "extract")?;
    let mut cfg = run.cfg.finetune.clone();
    cfg.seed = seed;
    cfg.init = InitMode::FromInitialFv;
    finetune_into(run, &model, seed, &inits, &cfg, "ffv")?;
    if run.cfg.random_init_control {
        cfg.init = InitMode::Random;
        finetune_into(run, &model, seed, &inits, &cfg, "ffv-random")?;
    }
    run.verify_frozen(&model)
}

fn basis(run: &Run, seed: u64) -> Result<Basis> {
    Basis::new(run.vectors(seed, "ffv", "finetune")?)
}

#[derive(Serialize)]
struct AffineTrainFile {
    problems: usize,
    epoch_losses: Vec<f64>,
    basis_digest: String,
}

/// Trains the affine map on analogies built from the non-test pairs.
pub fn cmd_cfv_train(run: &mut Run, seed: u64) -> Result<()> {
    let model = run.model()?;
    let basis = basis(run, seed)?;
    let train: Vec<RelationDataset> = run
        .world
        .splits
        .iter()
        .map(|s| {
            let pairs = s.extract.pairs.iter().chain(&s.finetune.pairs).cloned().collect();
            RelationDataset::new(s.extract.relation_id.clone(), s.extract.family, pairs)
        })
        .collect::<Result<_>>()?;
    let train: Vec<&RelationDataset> = train.iter().collect();
    let mut cfg = run.cfg.cfv.clone();
    cfg.seed = seed;
    let problems = build_training_analogies(&train, cfg.context_pairs, cfg.target_pairs, seed)?;
    let (affine, losses) = train_affine(&model, &run.cfg.prompt, &basis, &problems, &cfg)?;
    let dir = seed_dir(seed);
    let rel = format!("{dir}/cfv/affine.json");
    std::fs::create_dir_all(run.root.join(format!("{dir}/cfv"))).map_err(|e| Error::io(run.root.join(&dir), e))?;
    save_affine(&affine, run.root.join(&rel))?;
    run.manifest.record(&run.root, &rel, "cfv-train", Some(seed))?;
    let file = AffineTrainFile {
        problems: problems.len(),
        epoch_losses: losses,
        basis_digest: basis.digest(),
    };
    run.write_json(&format!("{dir}/cfv/train.json"), &file, "cfv-train", Some(seed))?;
    run.verify_frozen(&model)
}

/// Held-out one-shot analogies: both pairs from one relation's test split.
pub fn held_out_analogies(splits: &[RelationSplits], per_relation: usize, seed: u64) -> Vec<AnalogyProblem> {
    let mut out = Vec::new();
    for s in splits {
        let test = &s.test;
        if test.len() < 2 {
            continue;
        }
        let mut rng = seeded(seed, &["held-out-analogies", &test.relation_id]);
        for _ in 0..per_relation {
            let two: Vec<&WordPair> = test.pairs.choose_multiple(&mut rng, 2).collect();
            out.push(AnalogyProblem::new(
                &two[0].input,
                &two[0].output,
                &two[1].input,
                &two[1].output,
                Some(&test.relation_id),
            ));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Absent {
    pub condition: Condition,
    pub task: TaskKind,
    pub reason: String,
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub reports: Vec<EvalReport>,
    pub absent: Vec<Absent>,
}

enum Vectors {
    None,
    PerRelation(BTreeMap<String, FunctionVector>),
    Composite(Basis, Option<crate::cfv::AffineTransform>),
}

fn condition_vectors(run: &Run, seed: u64, c: Condition) -> std::result::Result<Vectors, String> {
    let (kind, producer) = match c {
        Condition::Baseline => return Ok(Vectors::None),
        Condition::InitialFv => ("fv/initial", "extract"),
        Condition::Actadd => ("fv/actadd", "extract"),
        Condition::MeanCentered => ("fv/mean-centered", "extract"),
        Condition::Ffv | Condition::Cfv | Condition::CfvAffine => ("ffv", "finetune"),
    };
    let vs = run.vectors(seed, kind, producer).map_err(|e| e.to_string())?;
    match c {
        Condition::Cfv => Ok(Vectors::Composite(Basis::new(vs).map_err(|e| e.to_string())?, None)),
        Condition::CfvAffine => {
            let rel = format!("{}/cfv/affine.json", seed_dir(seed));
            let path = run.require(&rel, "cfv-train").map_err(|e| e.to_string())?;
            let affine = load_affine(path).map_err(|e| e.to_string())?;
            Ok(Vectors::Composite(
                Basis::new(vs).map_err(|e| e.to_string())?,
                Some(affine),
            ))
        }
        _ => Ok(Vectors::PerRelation(
            vs.into_iter().map(|v| (v.relation.clone(), v)).collect(),
        )),
    }
}

/// All requested conditions on zero-shot, shuffled-label and one-shot
/// analogy tasks. Conditions whose artifacts are missing are reported as
/// absent rather than failing the command.
pub fn cmd_eval(run: &mut Run, seed: u64) -> Result<EvalOutcome> {
    let model = run.model()?;
    let t = run.cfg.prompt.clone();
    let digest = run.cfg.digest()?;
    let ctx = EvalContext::new(&model, &t, seed, &digest);
    let ev = run.cfg.eval.clone();
    let posterior: PosteriorConfig = run.cfg.cfv.posterior.clone();
    let analogies = held_out_analogies(&run.world.splits, ev.analogies_per_relation, seed);
    let file_analogies = match &run.cfg.data.analogy_file {
        Some(p) => load_analogy_file(p)?,
        None => Vec::new(),
    };
    let mut reports = Vec::new();
    let mut absent = Vec::new();
    for &c in &ev.conditions {
        let vectors = match condition_vectors(run, seed, c) {
            Ok(v) => v,
            Err(reason) => {
                for task in [TaskKind::ZeroShot, TaskKind::ShuffledLabel, TaskKind::OneShotAnalogy] {
                    absent.push(Absent {
                        condition: c,
                        task,
                        reason: reason.clone(),
                    });
                }
                continue;
            }
        };
        for s in &run.world.splits {
            let id = &s.test.relation_id;
            match &vectors {
                Vectors::None => {
                    reports.push(eval_zero_shot(&ctx, &s.test, None, c, ev.zero_shot_topk)?);
                    reports.push(eval_shuffled_label(&ctx, &s.test, &s.extract, ev.shots, None, c)?);
                }
                Vectors::PerRelation(map) => {
                    let fv = map.get(id);
                    reports.push(eval_zero_shot(&ctx, &s.test, fv, c, ev.zero_shot_topk)?);
                    reports.push(eval_shuffled_label(&ctx, &s.test, &s.extract, ev.shots, fv, c)?);
                }
                Vectors::Composite(basis, affine) => {
                    reports.push(eval_zero_shot_composite(
                        &ctx,
                        &s.test,
                        &s.finetune,
                        basis,
                        affine.as_ref(),
                        &posterior,
                        c,
                        ev.zero_shot_topk,
                    )?);
                }
            }
        }
        let method = match &vectors {
            Vectors::None => Some(AnalogyMethod::Textual),
            Vectors::Composite(basis, affine) => Some(AnalogyMethod::Composite {
                basis,
                affine: affine.as_ref(),
                posterior: &posterior,
            }),
            Vectors::PerRelation(_) => None,
        };
        match method {
            Some(m) => {
                if !analogies.is_empty() {
                    let mut r = eval_one_shot_analogy(&ctx, &analogies, m, c, ev.analogy_topk)?;
                    r.relation = Some("held-out".into());
                    reports.push(r);
                }
                if !file_analogies.is_empty() {
                    let mut r = eval_one_shot_analogy(&ctx, &file_analogies, m, c, ev.analogy_topk)?;
                    r.relation = Some("analogy-file".into());
                    reports.push(r);
                }
            }
            None => absent.push(Absent {
                condition: c,
                task: TaskKind::OneShotAnalogy,
                reason: "per-relation vectors need a relation label the analogy does not give".into(),
            }),
        }
        if matches!(vectors, Vectors::Composite(..)) {
            absent.push(Absent {
                condition: c,
                task: TaskKind::ShuffledLabel,
                reason: "composite vectors are built per source pair; shuffled prompts have none".into(),
            });
        }
    }
    let dir = seed_dir(seed);
    for r in &reports {
        let rel = format!(
            "{dir}/eval/{}/{}--{}.json",
            r.task.name(),
            r.condition.name(),
            file_name(r.relation.as_deref().unwrap_or("all"))
        );
        run.write_json(&rel, r, "eval", Some(seed))?;
    }
    let csv = summary_csv(&reports)?;
    run.write_bytes(&format!("{dir}/eval/summary.csv"), csv.as_bytes(), "eval", Some(seed))?;
    run.write_json(&format!("{dir}/eval/absent.json"), &absent, "eval", Some(seed))?;
    run.verify_frozen(&model)?;
    Ok(EvalOutcome { reports, absent })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RsaSummary {
    pub condition: Condition,
    pub r: f64,
    pub ci: Option<(f64, f64)>,
    pub n_cells: usize,
    pub within: f64,
    pub between: f64,
    /// `relation-membership` or the similarity file name.
    pub reference: String,
}

/// Representational similarity of blank-prompt head activations with and
/// without injected vectors, against human judgements when a similarity
/// file is configured and against relation membership otherwise.
pub fn cmd_rsa(run: &mut Run, seed: u64) -> Result<Vec<RsaSummary>> {
    let model = run.model()?;
    let t = run.cfg.prompt.clone();
    let relation_of = |p: &WordPair| -> Option<String> {
        run.world
            .splits
            .iter()
            .find(|s| [&s.extract, &s.finetune, &s.test].iter().any(|d| d.pairs.contains(p)))
            .map(|s| s.extract.relation_id.clone())
    };
    let (pairs, human, reference): (Vec<WordPair>, HumanSimilarityMatrix, String) = match &run.cfg.data.similarity_file
    {
        Some(path) => {
            let h = load_human_similarity_matrix(path)?;
            let pairs = h
                .labels
                .iter()
                .map(|l| {
                    l.split_once(':')
                        .map(|(a, b)| WordPair::new(a, b))
                        .ok_or_else(|| Error::Data(format!("similarity label {l:?} is not input:output")))
                })
                .collect::<Result<Vec<_>>>()?;
            (pairs, h, path.display().to_string())
        }
        None => {
            let mut pairs = Vec::new();
            for s in run
                .world
                .splits
                .iter()
                .filter(|s| run.world.trained.contains(&s.test.relation_id))
            {
                let mut rng = seeded(seed, &["rsa", &s.test.relation_id]);
                pairs.extend(
                    s.test
                        .pairs
                        .choose_multiple(&mut rng, run.cfg.rsa.pairs_per_relation)
                        .cloned(),
                );
            }
            let groups: Vec<Option<String>> = pairs.iter().map(relation_of).collect();
            let labels = pairs.iter().map(|p| format!("{}:{}", p.input, p.output)).collect();
            let matrix = groups
                .iter()
                .map(|a| groups.iter().map(|b| if a == b { 0.0 } else { 1.0 }).collect())
                .collect();
            (
                pairs,
                HumanSimilarityMatrix::new(labels, matrix)?,
                "relation-membership".into(),
            )
        }
    };
    let groups: Vec<String> = pairs
        .iter()
        .map(|p| relation_of(p).unwrap_or_else(|| "unknown".into()))
        .collect();
    let dir = seed_dir(seed);
    run.write_bytes(
        &format!("{dir}/rsa/reference.csv"),
        human.to_csv_string()?.as_bytes(),
        "rsa",
        Some(seed),
    )?;
    let mut out = Vec::new();
    for c in [Condition::Baseline, Condition::InitialFv, Condition::Ffv] {
        let map: BTreeMap<String, FunctionVector> = match c {
            Condition::Baseline => BTreeMap::new(),
            Condition::InitialFv => match run.vectors(seed, "fv/initial", "extract") {
                Ok(v) => v.into_iter().map(|v| (v.relation.clone(), v)).collect(),
                Err(_) => continue,
            },
            _ => match run.vectors(seed, "ffv", "finetune") {
                Ok(v) => v.into_iter().map(|v| (v.relation.clone(), v)).collect(),
                Err(_) => continue,
            },
        };
        let injections: Vec<Option<&FunctionVector>> = groups.iter().map(|g| map.get(g)).collect();
        let layer = map
            .values()
            .next()
            .map(|v| v.layer)
            .unwrap_or_else(|| model.config().default_layer());
        let read = run
            .cfg
            .rsa
            .read_layer
            .unwrap_or(layer + 1)
            .min(model.config().n_layers - 1);
        let r = rsa_similarity(&model, &t, &pairs, &injections, read, &human, run.cfg.rsa.metric)?;
        let (within, between) = r.model.within_between(&groups)?;
        run.write_bytes(
            &format!("{dir}/rsa/{}.csv", c.name()),
            r.model.to_csv_string()?.as_bytes(),
            "rsa",
            Some(seed),
        )?;
        out.push(RsaSummary {
            condition: c,
            r: r.r,
            ci: r.ci,
            n_cells: r.n_cells,
            within,
            between,
            reference: reference.clone(),
        });
    }
    run.write_json(&format!("{dir}/rsa/results.json"), &out, "rsa", Some(seed))?;
    run.verify_frozen(&model)?;
    Ok(out)
}

pub type DecodeTable = BTreeMap<String, BTreeMap<String, Vec<(String, f64)>>>;

/// Top-k tokens of every initial and fine-tuned vector decoded from the
/// blank prompt.
pub fn cmd_decode(run: &mut Run, seed: u64) -> Result<DecodeTable> {
    let model = run.model()?;
    let t = run.cfg.prompt.clone();
    let mut table = DecodeTable::new();
    for (kind, producer, label) in [("fv/initial", "extract", "initial-fv"), ("ffv", "finetune", "ffv")] {
        let vs = match run.vectors(seed, kind, producer) {
            Ok(v) => v,
            Err(e) if label == "initial-fv" => return Err(e),
            Err(_) => continue,
        };
        let entry = table.entry(label.to_string()).or_default();
        for v in &vs {
            entry.insert(v.relation.clone(), decode_probe(&model, &t, v, run.cfg.decode.k)?);
        }
    }
    run.write_json(
        &format!("{}/decode/decode.json", seed_dir(seed)),
        &table,
        "decode",
        Some(seed),
    )?;
    run.verify_frozen(&model)?;
    Ok(table)
}

/// Zero-shot top-1 accuracy of each relation's vectors injected at every
/// layer in the configured range.
pub fn cmd_layer_sweep(run: &mut Run, seed: u64) -> Result<String> {
    let model = run.model()?;
    let t = run.cfg.prompt.clone();
    let [a, b] = run.cfg.sweep.layers.unwrap_or([0, model.config().n_layers - 1]);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["relation", "vector", "layer", "accuracy"])?;
    for (kind, producer, label) in [("fv/initial", "extract", "initial-fv"), ("ffv", "finetune", "ffv")] {
        let vs = match run.vectors(seed, kind, producer) {
            Ok(v) => v,
            Err(e) if label == "initial-fv" => return Err(e),
            Err(_) => continue,
        };
        for (v, s) in vs.iter().zip(&run.world.splits) {
            for layer in a..=b {
                let acc = injected_top1_accuracy(&model, &t, &s.test.pairs, &v.vector, layer)?;
                w.write_record([v.relation.as_str(), label, &layer.to_string(), &format!("{acc:.6}")])?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    run.write_bytes(
        &format!("{}/layer_sweep.csv", seed_dir(seed)),
        &bytes,
        "layer-sweep",
        Some(seed),
    )?;
    run.verify_frozen(&model)?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

/// The full pipeline for each seed. Pretraining runs once, and only when
/// no checkpoint is configured or recorded yet.
pub fn cmd_all(run: &mut Run, seeds: &[u64]) -> Result<()> {
    if run.cfg.model.checkpoint.is_none() && !run.available(Run::checkpoint_rel()) {
        cmd_pretrain(run)?;
    }
    for &s in seeds {
        cmd_extract(run, s)?;
        cmd_finetune(run, s)?;
        cmd_cfv_train(run, s)?;
        cmd_eval(run, s)?;
        cmd_rsa(run, s)?;
        cmd_decode(run, s)?;
        cmd_layer_sweep(run, s)?;
    }
    run.save_manifest()
}
