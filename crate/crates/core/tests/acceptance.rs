//! End-to-end acceptance run on the default toy model. Most criteria share
//! one trained checkpoint, so this is a single sequential program (no test
//! harness) that prints one PASS/FAIL line per criterion and exits nonzero
//! if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use cpu_time::ThreadTime;
use rand::Rng;
use rand_distr::StandardNormal;

use fvlab::cfv::{
    affine_loss, compose, posterior, relation_scores_many, solve_analogies, AffineTransform, Basis, PosteriorConfig,
    PosteriorMode, PreparedAnalogy,
};
use fvlab::data::synthetic::{generate_relation, world_vocabulary, DEFAULT_GENERATORS};
use fvlab::data::WordPair;
use fvlab::eval::{
    eval_zero_shot_composite, icl_accuracy, pearson, rsa_activations, Condition, DissimilarityMatrix, EvalContext,
    EvalReport, Metric, TaskKind,
};
use fvlab::finetune::{loss_lz, FineTuneTrace};
use fvlab::fv::{compute_cie, load_function_vector, mean_task_activations, FunctionVector, Provenance};
use fvlab::model::{InterventionSpec, ModelConfig, RecordSpec, TransformerModel};
use fvlab::pipeline::{
    cmd_all, cmd_cfv_train, cmd_eval, cmd_extract, cmd_finetune, cmd_pretrain, cmd_rsa, held_out_analogies,
    ExtractionFile, Run, RunConfig, RunManifest,
};
use fvlab::prompts::{build_zero_shot_prompt, PromptTemplate};
use fvlab::rng::seeded;
use fvlab::tensor::softmax;

const SEEDS: [u64; 3] = [0, 1, 2];
const EPS: f64 = 1e-5;

struct Verdict {
    n: usize,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(n: usize, title: &'static str, pass: bool, detail: String) -> Verdict {
    eprintln!("[criterion {n} evaluated: {}]", if pass { "pass" } else { "fail" });
    Verdict { n, title, pass, detail }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> T {
    let text = std::fs::read_to_string(path.as_ref()).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Componentwise relative error with a 1e-6 floor on the denominator, so
/// components that vanish analytically are compared absolutely.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn small_model(seed: u64) -> TransformerModel {
    let vocab = world_vocabulary().unwrap();
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_head: 8,
        d_mlp: 32,
        vocab_size: vocab.len(),
        max_seq_len: 64,
        seed,
    };
    TransformerModel::init(cfg, vocab).unwrap()
}

fn gaussian(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn criterion_gradients() -> Verdict {
    let start = Instant::now();
    let t = PromptTemplate::default();
    let mut worst_lz: f64 = 0.0;
    let mut worst_affine: f64 = 0.0;
    let instances = 20;
    for i in 0..instances {
        let mut rng = seeded(i, &["acceptance", "gradients"]);
        let model = small_model(100 + i);
        let rel = generate_relation(DEFAULT_GENERATORS[i as usize % DEFAULT_GENERATORS.len()]).unwrap();
        let pair = rel.pairs[rng.random_range(0..rel.pairs.len())].clone();
        let layer = rng.random_range(0..2);
        let lambda = rng.random_range(0.0..0.5);
        let v = FunctionVector::new("r", layer, Provenance::Initial, gaussian(&mut rng, 16, 0.5)).unwrap();
        let (_, g) = loss_lz(&model, &t, &v, &pair, lambda).unwrap();
        for (d, &gd) in g.iter().enumerate() {
            let at = |delta: f64| {
                let mut w = v.clone();
                w.vector[d] += delta;
                loss_lz(&model, &t, &w, &pair, lambda).unwrap().0
            };
            let fd = (at(EPS) - at(-EPS)) / (2.0 * EPS);
            worst_lz = worst_lz.max(rel_err(gd, fd));
        }

        let z = 3;
        let layer = rng.random_range(0..2);
        let vectors = (0..z)
            .map(|k| {
                FunctionVector::new(
                    format!("r{k}"),
                    layer,
                    Provenance::FineTuned,
                    gaussian(&mut rng, 16, 0.5),
                )
                .unwrap()
            })
            .collect();
        let basis = Basis::new(vectors).unwrap();
        let vocab = model.vocab();
        let batch: Vec<PreparedAnalogy> = (0..3)
            .map(|_| {
                let q = &rel.pairs[rng.random_range(0..rel.pairs.len())];
                let gold = &rel.pairs[rng.random_range(0..rel.pairs.len())].output;
                PreparedAnalogy {
                    posterior: softmax(&gaussian(&mut rng, z, 1.0)),
                    target: build_zero_shot_prompt(vocab, &t, &q.input).unwrap().tokens,
                    gold: vocab.first_token(gold).unwrap() as usize,
                }
            })
            .collect();
        let mut affine = AffineTransform::identity(basis.ids());
        for row in &mut affine.a {
            for x in row.iter_mut() {
                *x += rng.random_range(-0.5..0.5);
            }
        }
        affine.b = gaussian(&mut rng, z, 0.3);
        let lambda = rng.random_range(0.0..0.5);
        let (_, ga, gb) = affine_loss(&model, &basis, &affine, &batch, lambda).unwrap();
        let loss_with = |f: &dyn Fn(&mut AffineTransform)| {
            let mut g = affine.clone();
            f(&mut g);
            affine_loss(&model, &basis, &g, &batch, lambda).unwrap().0
        };
        for r in 0..z {
            for c in 0..z {
                let fd = (loss_with(&|g| g.a[r][c] += EPS) - loss_with(&|g| g.a[r][c] -= EPS)) / (2.0 * EPS);
                worst_affine = worst_affine.max(rel_err(ga[r * z + c], fd));
            }
            let fd = (loss_with(&|g| g.b[r] += EPS) - loss_with(&|g| g.b[r] -= EPS)) / (2.0 * EPS);
            worst_affine = worst_affine.max(rel_err(gb[r], fd));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "gradient oracle",
        worst_lz <= 1e-4 && worst_affine <= 1e-4 && secs <= 120.0,
        format!("{instances} instances each; max rel err L_z {worst_lz:.2e}, affine {worst_affine:.2e}; {secs:.1}s"),
    )
}

fn criterion_patch_identity(model: &TransformerModel) -> Verdict {
    let start = Instant::now();
    let cfg = model.config().clone();
    let mut rng = seeded(0, &["acceptance", "patch-identity"]);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let len = rng.random_range(1..=cfg.max_seq_len.min(60));
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
        let base = model.forward(&tokens, &[], &RecordSpec::final_heads()).unwrap();
        let mut check = |interventions: &[InterventionSpec]| {
            let out = model.forward(&tokens, interventions, &RecordSpec::default()).unwrap();
            for (a, b) in out.logits.data().iter().zip(base.logits.data()) {
                worst = worst.max((a - b).abs());
            }
        };
        let layer = rng.random_range(0..cfg.n_layers);
        check(&[InterventionSpec::add(layer, vec![0.0; cfg.d_model])]);
        let (l, j) = (rng.random_range(0..cfg.n_layers), rng.random_range(0..cfg.n_heads));
        let own = base.record.head(l, j, len - 1).unwrap().to_vec();
        check(&[InterventionSpec::replace_head(l, j, own)]);
        let all: Vec<InterventionSpec> = (0..cfg.n_layers)
            .flat_map(|l| (0..cfg.n_heads).map(move |j| (l, j)))
            .map(|(l, j)| InterventionSpec::replace_head(l, j, base.record.head(l, j, len - 1).unwrap().to_vec()))
            .collect();
        check(&all);
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        2,
        "patch identity",
        worst <= 1e-12 && secs <= 60.0,
        format!("100 random prompts; max |logit diff| {worst:.1e}; {secs:.1}s"),
    )
}

fn criterion_icl(run: &Run, model: &TransformerModel, cpu_secs: f64) -> Verdict {
    let mut hits = 0.0;
    let mut total = 0usize;
    let mut per = Vec::new();
    for s in run
        .world
        .splits
        .iter()
        .filter(|s| run.world.trained.contains(&s.test.relation_id))
    {
        let acc = icl_accuracy(model, &run.cfg.prompt, &s.test, &s.extract, 10, 0).unwrap();
        hits += acc * s.test.len() as f64;
        total += s.test.len();
        per.push(format!("{}={acc:.2}", s.test.relation_id));
    }
    let pooled = hits / total as f64;
    verdict(
        3,
        "ICL emergence",
        pooled >= 0.9 && cpu_secs <= 900.0,
        format!(
            "pooled 10-shot top-1 {pooled:.3} over {total} held-out pairs [{}]; pretraining {cpu_secs:.0}s CPU",
            per.join(" ")
        ),
    )
}

type ZeroShot = BTreeMap<(String, Condition), Vec<f64>>;

fn zero_shot_table(reports: &[EvalReport], table: &mut ZeroShot) {
    for r in reports.iter().filter(|r| r.task == TaskKind::ZeroShot) {
        let rel = r.relation.clone().unwrap();
        table.entry((rel, r.condition)).or_default().push(r.accuracy);
    }
}

fn criterion_table(table: &ZeroShot, relations: &[String], secs: f64) -> Verdict {
    let get = |rel: &str, c: Condition| mean(&table[&(rel.to_string(), c)]);
    let mut ok = true;
    let mut lifts = Vec::new();
    let mut gains = Vec::new();
    let mut worst_lift = f64::INFINITY;
    let mut worst_gain = f64::INFINITY;
    for rel in relations {
        let (base, init, ffv) = (
            get(rel, Condition::Baseline),
            get(rel, Condition::InitialFv),
            get(rel, Condition::Ffv),
        );
        ok &= init - base >= 0.20 && ffv >= init;
        worst_lift = worst_lift.min(init - base);
        worst_gain = worst_gain.min(ffv - init);
        lifts.push(init - base);
        gains.push(ffv - init);
    }
    let mean_gain = mean(&gains);
    ok &= mean_gain >= 0.05 && secs <= 1200.0;
    verdict(
        4,
        "zero-shot directions",
        ok,
        format!(
            "seed means per relation: min FV lift {worst_lift:.3}, min FFV-FV {worst_gain:.3}, mean FFV-FV {mean_gain:.3}; extract+finetune+eval {secs:.0}s"
        ),
    )
}

fn plateau_epochs(root: &Path, kind: &str) -> Vec<f64> {
    let mut out = Vec::new();
    for seed in SEEDS {
        let traces: BTreeMap<String, FineTuneTrace> = read_json(root.join(format!("seed-{seed}/{kind}/traces.json")));
        for t in traces.values() {
            out.push(t.epochs_to_plateau(0.9).unwrap() as f64);
        }
    }
    out
}

fn criterion_random_init(root: &Path) -> Verdict {
    let fv = mean(&plateau_epochs(root, "ffv"));
    let random = mean(&plateau_epochs(root, "ffv-random"));
    verdict(
        5,
        "random-init control",
        fv <= 0.5 * random,
        format!("mean epochs to 90% of plateau: FV-init {fv:.2}, random-init {random:.2}"),
    )
}

fn criterion_cie(run: &Run) -> Verdict {
    let mut min_selected = f64::INFINITY;
    for seed in SEEDS {
        let ex: ExtractionFile = read_json(run.root.join(format!("seed-{seed}/fv/extraction.json")));
        for rel in &run.world.trained {
            min_selected = min_selected.min(ex.selected_mean_cie[rel]);
        }
    }
    let vocab = run.world.vocab.clone();
    let untrained = TransformerModel::init(run.cfg.model.model_config(vocab.len()), vocab).unwrap();
    let e = &run.cfg.extract;
    let mut max_untrained: f64 = 0.0;
    for s in &run.world.splits {
        let means = mean_task_activations(&untrained, &run.cfg.prompt, &s.extract, e.shots, e.mean_prompts, 0).unwrap();
        let cie = compute_cie(
            &untrained,
            &run.cfg.prompt,
            &s.extract,
            &means,
            e.shots,
            e.cie_prompts,
            0,
        )
        .unwrap();
        max_untrained = cie.values.iter().fold(max_untrained, |m, v| m.max(v.abs()));
    }
    verdict(
        6,
        "CIE sanity",
        min_selected > 0.0 && max_untrained < 0.01,
        format!("min selected-head mean CIE {min_selected:.4} (trained); max |CIE| over heads {max_untrained:.2e} (untrained)"),
    )
}

fn load_basis(run: &Run, seed: u64) -> Basis {
    let vectors = run
        .world
        .relation_ids()
        .iter()
        .map(|id| load_function_vector(run.root.join(format!("seed-{seed}/ffv/{id}.json"))).unwrap())
        .collect();
    Basis::new(vectors).unwrap()
}

fn criterion_cfv_algebra(run: &Run, model: &TransformerModel) -> Verdict {
    let basis = load_basis(run, 0);
    let t = &run.cfg.prompt;
    let src = WordPair::new("a", "b");
    let one_hot = (0..basis.len()).all(|z| {
        let w: Vec<f64> = (0..basis.len()).map(|k| if k == z { 1.0 } else { 0.0 }).collect();
        let c = compose(&basis, &w, &src).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        bits(&c.fv.vector) == bits(&basis.vectors()[z].vector)
    });

    let sources: Vec<WordPair> = run
        .world
        .splits
        .iter()
        .flat_map(|s| s.test.pairs.iter().cloned())
        .collect();
    let scores = relation_scores_many(model, t, &basis, &sources).unwrap();
    let mut worst_sum: f64 = 0.0;
    for mode in [PosteriorMode::Probability, PosteriorMode::LogProbability] {
        for temperature in [0.1, 1.0, 3.0] {
            let cfg = PosteriorConfig { mode, temperature };
            for s in &scores {
                worst_sum = worst_sum.max((posterior(s, &cfg).unwrap().iter().sum::<f64>() - 1.0).abs());
            }
        }
    }

    let identity = AffineTransform::identity(basis.ids());
    let pc = run.cfg.cfv.posterior.clone();
    let digest = run.cfg.digest().unwrap();
    let ctx = EvalContext::new(model, t, 0, &digest);
    let mut same = true;
    for s in &run.world.splits {
        let k = run.cfg.eval.zero_shot_topk;
        let with = eval_zero_shot_composite(
            &ctx,
            &s.test,
            &s.finetune,
            &basis,
            Some(&identity),
            &pc,
            Condition::Cfv,
            k,
        );
        let without = eval_zero_shot_composite(&ctx, &s.test, &s.finetune, &basis, None, &pc, Condition::Cfv, k);
        same &= with.unwrap() == without.unwrap();
    }
    let problems = held_out_analogies(&run.world.splits, 4, 0);
    let with = solve_analogies(model, t, &basis, Some(&identity), &pc, &problems, 5).unwrap();
    let without = solve_analogies(model, t, &basis, None, &pc, &problems, 5).unwrap();
    same &= with == without;

    verdict(
        7,
        "CFV algebra",
        one_hot && worst_sum <= 1e-9 && same,
        format!(
            "one-hot bitwise {one_hot}; max |sum p - 1| {worst_sum:.1e} over {} sources; identity == none {same} ({} analogies)",
            scores.len(),
            problems.len()
        ),
    )
}

fn criterion_analogies(held_out: &BTreeMap<Condition, Vec<f64>>, secs: f64) -> Verdict {
    let base = mean(&held_out[&Condition::Baseline]);
    let cfv = mean(&held_out[&Condition::Cfv]);
    let affine = mean(&held_out[&Condition::CfvAffine]);
    verdict(
        8,
        "held-out analogies",
        cfv - base >= 0.10 && affine - base >= 0.10 && affine >= cfv && secs <= 900.0,
        format!(
            "top-5 over 3 seeds: textual {base:.3}, identity-affine CFV {cfv:.3}, trained-affine CFV {affine:.3}; cfv-train+eval {secs:.0}s"
        ),
    )
}

fn criterion_rsa(run: &Run, model: &TransformerModel, within_between: &[(f64, f64)]) -> Verdict {
    let basis = load_basis(run, 0);
    let by_id: BTreeMap<String, &FunctionVector> = basis.vectors().iter().map(|v| (v.relation.clone(), v)).collect();
    let mut pairs = Vec::new();
    let mut injections = Vec::new();
    for s in &run.world.splits {
        for p in s.test.pairs.iter().take(4) {
            pairs.push(p.clone());
            injections.push(Some(by_id[&s.test.relation_id]));
        }
    }
    let read = (basis.layer() + 1).min(model.config().n_layers - 1);
    let feats = rsa_activations(model, &run.cfg.prompt, &pairs, &injections, read).unwrap();
    let labels = pairs.iter().map(|p| format!("{}:{}", p.input, p.output)).collect();
    let upper = DissimilarityMatrix::from_features(labels, &feats, Metric::Cosine)
        .unwrap()
        .upper_triangle();
    let r = pearson(&upper, &upper).unwrap();
    let clustered = within_between.iter().all(|(w, b)| w < b);
    let shown: Vec<String> = within_between.iter().map(|(w, b)| format!("{w:.3}<{b:.3}")).collect();
    verdict(
        9,
        "RSA properties",
        r == 1.0 && clustered,
        format!("self r = {r:?}; FFV within<between per seed [{}]", shown.join(" ")),
    )
}

fn tiny_config(out: &Path) -> RunConfig {
    let mut c = RunConfig {
        out_dir: out.to_path_buf(),
        random_init_control: true,
        ..RunConfig::default()
    };
    c.model.n_layers = 2;
    c.model.n_heads = 2;
    c.model.d_model = 16;
    c.model.d_head = 8;
    c.model.d_mlp = 32;
    c.model.max_seq_len = 64;
    c.data.synthetic.generators = vec!["uppercase-map".into(), "antonym-upper".into(), "successor".into()];
    c.data.synthetic.sequences_per_relation = 20;
    c.data.synthetic.shots = 4;
    c.pretrain.steps = 6;
    c.pretrain.batch_size = 4;
    c.pretrain.warmup = 1;
    c.extract.shots = 4;
    c.extract.mean_prompts = 3;
    c.extract.cie_prompts = 3;
    c.extract.top_k = 2;
    c.finetune.epochs = 2;
    c.cfv.epochs = 1;
    c.cfv.context_pairs = 2;
    c.cfv.target_pairs = 2;
    c.eval.shots = 4;
    c.eval.analogies_per_relation = 2;
    c.rsa.pairs_per_relation = 2;
    c
}

fn hashes(root: &Path, prefix: &[&str]) -> Vec<(String, String)> {
    RunManifest::load(root)
        .unwrap()
        .entries
        .into_iter()
        .filter(|e| prefix.is_empty() || prefix.iter().any(|p| e.path.starts_with(p)))
        .map(|e| (e.path, e.sha256))
        .collect()
}

/// The complete pipeline twice on a reduced config, plus a repeat of
/// extraction and fine-tuning on the default model.
fn criterion_determinism(run: &Run) -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let mut r = Run::open(tiny_config(d.path())).unwrap();
        cmd_all(&mut r, &[0, 1]).unwrap();
    }
    let (ha, hb) = (hashes(a.path(), &[]), hashes(b.path(), &[]));
    let reduced = ha == hb;

    let c = tempfile::tempdir().unwrap();
    let mut cfg = run.cfg.clone();
    cfg.out_dir = c.path().to_path_buf();
    cfg.model.checkpoint = Some(run.root.join("model/checkpoint.json"));
    let mut again = Run::open(cfg).unwrap();
    cmd_extract(&mut again, 0).unwrap();
    cmd_finetune(&mut again, 0).unwrap();
    let prefixes = ["seed-0/fv/", "seed-0/ffv/", "seed-0/ffv-random/"];
    let first: Vec<_> = hashes(&run.root, &prefixes);
    let second: Vec<_> = hashes(c.path(), &prefixes);
    let full = !first.is_empty() && first == second;
    verdict(
        10,
        "determinism",
        reduced && full,
        format!(
            "reduced full pipeline x2: {} artifacts identical {reduced}; default-model extract+finetune x2: {} artifacts identical {full}",
            ha.len(),
            first.len()
        ),
    )
}

fn criterion_frozen(run: &mut Run, pretrained: &str) -> Verdict {
    let recorded = run.manifest.weights_digest.clone();
    let reloaded = run.model().unwrap().weights_digest();
    let on_disk = RunManifest::load(&run.root).unwrap().weights_digest;
    let pass =
        recorded.as_deref() == Some(pretrained) && reloaded == pretrained && on_disk.as_deref() == Some(pretrained);
    verdict(
        11,
        "frozen weights",
        pass,
        format!(
            "digest {}.. after pretraining, every command and reload",
            &pretrained[..12]
        ),
    )
}

fn main() {
    let mut verdicts = vec![criterion_gradients()];

    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        out_dir: dir.path().to_path_buf(),
        random_init_control: true,
        ..RunConfig::default()
    };
    let mut run = Run::open(cfg).unwrap();
    let cpu = ThreadTime::now();
    let model = cmd_pretrain(&mut run).unwrap();
    let cpu_secs = cpu.elapsed().as_secs_f64();
    let pretrained = model.weights_digest();

    verdicts.push(criterion_patch_identity(&model));
    verdicts.push(criterion_icl(&run, &model, cpu_secs));

    let mut table = ZeroShot::new();
    let mut held_out: BTreeMap<Condition, Vec<f64>> = BTreeMap::new();
    let mut within_between = Vec::new();
    let (mut table_secs, mut analogy_secs) = (0.0, 0.0);
    for seed in SEEDS {
        let t = Instant::now();
        cmd_extract(&mut run, seed).unwrap();
        cmd_finetune(&mut run, seed).unwrap();
        table_secs += t.elapsed().as_secs_f64();
        let t = Instant::now();
        cmd_cfv_train(&mut run, seed).unwrap();
        analogy_secs += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let out = cmd_eval(&mut run, seed).unwrap();
        let eval_secs = t.elapsed().as_secs_f64();
        table_secs += eval_secs;
        analogy_secs += eval_secs;
        zero_shot_table(&out.reports, &mut table);
        for r in out.reports.iter().filter(|r| r.task == TaskKind::OneShotAnalogy) {
            held_out.entry(r.condition).or_default().push(r.accuracy);
        }
        let rsa = cmd_rsa(&mut run, seed).unwrap();
        let ffv = rsa.iter().find(|r| r.condition == Condition::Ffv).unwrap();
        within_between.push((ffv.within, ffv.between));
        eprintln!("[seed {seed} done]");
    }

    let relations: Vec<String> = run.world.trained.iter().cloned().collect();
    verdicts.push(criterion_table(&table, &relations, table_secs));
    verdicts.push(criterion_random_init(&run.root));
    verdicts.push(criterion_cie(&run));
    verdicts.push(criterion_cfv_algebra(&run, &model));
    verdicts.push(criterion_analogies(&held_out, analogy_secs));
    verdicts.push(criterion_rsa(&run, &model, &within_between));
    verdicts.push(criterion_determinism(&run));
    verdicts.push(criterion_frozen(&mut run, &pretrained));

    verdicts.sort_by_key(|v| v.n);
    for v in &verdicts {
        println!(
            "CRITERION {:2} {} {}: {}",
            v.n,
            if v.pass { "PASS" } else { "FAIL" },
            v.title,
            v.detail
        );
    }
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.pass).map(|v| v.n).collect();
    if !failed.is_empty() {
        eprintln!("criteria failed: {failed:?}");
        std::process::exit(1);
    }
}
