use super::*;
use crate::fv::Provenance;
use crate::testutil::{tiny_model, tiny_relation};
use proptest::prelude::*;

fn template() -> PromptTemplate {
    PromptTemplate::default()
}

fn fv(layer: usize, scale: f64) -> FunctionVector {
    let v = (0..16).map(|i| scale * ((i as f64) * 0.7).sin()).collect();
    FunctionVector::new("forward", layer, Provenance::Initial, v).unwrap()
}

#[test]
fn zero_vector_matches_baseline() {
    let m = tiny_model(1);
    let t = template();
    let ctx = EvalContext::new(&m, &t, 0, "cfg");
    let rel = tiny_relation("forward");
    let zero = FunctionVector::zeros("forward", 1, Provenance::Initial, 16);
    let a = eval_zero_shot(&ctx, &rel, None, Condition::Baseline, 3).unwrap();
    let b = eval_zero_shot(&ctx, &rel, Some(&zero), Condition::InitialFv, 3).unwrap();
    assert_eq!(a.items, b.items);
    let a = eval_shuffled_label(&ctx, &rel, &rel, 4, None, Condition::Baseline).unwrap();
    let b = eval_shuffled_label(&ctx, &rel, &rel, 4, Some(&zero), Condition::InitialFv).unwrap();
    assert_eq!(a.items, b.items);
    assert_eq!(a.k, 1);
}

#[test]
fn full_vocabulary_top_k_always_hits() {
    let m = tiny_model(1);
    let t = template();
    let ctx = EvalContext::new(&m, &t, 0, "cfg");
    let r = eval_zero_shot(
        &ctx,
        &tiny_relation("forward"),
        Some(&fv(0, 3.0)),
        Condition::InitialFv,
        m.vocab().len(),
    )
    .unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert_eq!(r.hits(), 12);
}

#[test]
fn reports_are_deterministic_and_seed_sensitive() {
    let m = tiny_model(1);
    let t = template();
    let rel = tiny_relation("forward");
    let run = |seed| {
        let ctx = EvalContext::new(&m, &t, seed, "cfg");
        eval_shuffled_label(&ctx, &rel, &rel, 5, None, Condition::Baseline).unwrap()
    };
    assert_eq!(run(4), run(4));
    let digests = |r: &EvalReport| r.items.iter().map(|i| i.prompt_digest.clone()).collect::<Vec<_>>();
    assert_ne!(digests(&run(4)), digests(&run(5)));
    // Conditions share prompts.
    let ctx = EvalContext::new(&m, &t, 4, "cfg");
    let with = eval_shuffled_label(&ctx, &rel, &rel, 5, Some(&fv(1, 1.0)), Condition::InitialFv).unwrap();
    assert_eq!(digests(&with), digests(&run(4)));
}

#[test]
fn shuffled_label_needs_enough_demonstrations() {
    let m = tiny_model(1);
    let t = template();
    let ctx = EvalContext::new(&m, &t, 0, "cfg");
    let rel = tiny_relation("forward");
    assert!(eval_shuffled_label(&ctx, &rel, &rel, 12, None, Condition::Baseline).is_err());
    assert!(eval_shuffled_label(&ctx, &rel, &rel, 6, None, Condition::Baseline).is_ok());
}

#[test]
fn injected_accuracy_agrees_with_zero_shot_report() {
    let m = tiny_model(2);
    let t = template();
    let ctx = EvalContext::new(&m, &t, 0, "cfg");
    let rel = tiny_relation("backward");
    let v = fv(1, 4.0);
    let r = eval_zero_shot(&ctx, &rel, Some(&v), Condition::InitialFv, 1).unwrap();
    let acc = injected_top1_accuracy(&m, &t, &rel.pairs, &v.vector, 1).unwrap();
    assert_eq!(acc, r.accuracy);
}

#[test]
fn textual_analogy_top_k_is_well_formed() {
    let m = tiny_model(1);
    let t = template();
    let ctx = EvalContext::new(&m, &t, 0, "cfg");
    let problems = vec![AnalogyProblem::new("x1", "y1", "x2", "y2", None)];
    let r = eval_one_shot_analogy(&ctx, &problems, AnalogyMethod::Textual, Condition::Baseline, 5).unwrap();
    assert_eq!(r.items[0].top_k.len(), 5);
    assert!(eval_one_shot_analogy(&ctx, &[], AnalogyMethod::Textual, Condition::Baseline, 5).is_err());
}

#[test]
fn pearson_and_fisher_interval() {
    let a = [1.0, 2.0, 4.0, 3.0, 7.0];
    let neg: Vec<f64> = a.iter().map(|x| -2.0 * x + 1.0).collect();
    assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
    // Hand value: x = [1,2,3], y = [1,3,2] gives r = 0.5.
    assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
    assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    let (lo, hi) = fisher_ci(0.5, 28).unwrap();
    // atanh(0.5) = 0.549306, se = 0.2.
    assert!((lo - (0.549_306_144_334_054_9_f64 - 0.391_992_796_908_010_8).tanh()).abs() < 1e-12);
    assert!(lo < 0.5 && 0.5 < hi);
    assert!(fisher_ci(0.5, 3).is_err());
}

proptest! {
    #[test]
    fn dissimilarity_invariants(
        feats in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 4), 3..7),
        corr in any::<bool>(),
    ) {
        let feats: Vec<Vec<f64>> = feats.into_iter().map(|mut f| { f[0] += 5.0; f[1] -= 4.0; f }).collect();
        let labels = (0..feats.len()).map(|i| format!("w{i}")).collect();
        let metric = if corr { Metric::Correlation } else { Metric::Cosine };
        let dm = DissimilarityMatrix::from_features(labels, &feats, metric).unwrap();
        for i in 0..feats.len() {
            prop_assert!(dm.matrix[i][i].abs() <= 1e-12);
            for j in 0..feats.len() {
                prop_assert_eq!(dm.matrix[i][j], dm.matrix[j][i]);
                prop_assert!((-1e-12..=2.0 + 1e-12).contains(&dm.matrix[i][j]));
            }
        }
        prop_assert_eq!(dm.upper_triangle().len(), feats.len() * (feats.len() - 1) / 2);
    }

    #[test]
    fn self_correlation_is_exactly_one(xs in proptest::collection::vec(-1e3f64..1e3, 2..200)) {
        prop_assume!(xs.iter().any(|&x| x != xs[0]));
        prop_assert_eq!(pearson(&xs, &xs).unwrap(), 1.0);
    }
}

#[test]
fn cosine_dissimilarity_hand_values() {
    let labels = vec!["a".to_string(), "b".into(), "c".into()];
    let f = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![-3.0, 0.0]];
    let dm = DissimilarityMatrix::from_features(labels, &f, Metric::Cosine).unwrap();
    assert_eq!(dm.upper_triangle(), vec![1.0, 2.0, 1.0]);
    let (w, b) = dm.within_between(&["g".into(), "g".into(), "h".into()]).unwrap();
    assert_eq!((w, b), (1.0, 1.5));
}

#[test]
fn rsa_checks_labels_and_reports_interval() {
    let m = tiny_model(1);
    let t = template();
    let pairs: Vec<WordPair> = tiny_relation("forward").pairs[..6].to_vec();
    let labels: Vec<String> = pairs.iter().map(|p| format!("{}:{}", p.input, p.output)).collect();
    let n = labels.len();
    let matrix = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        ((i + j) % 3) as f64 + 0.5 * (i * j) as f64
                    }
                })
                .collect()
        })
        .collect();
    let human = HumanSimilarityMatrix::new(labels, matrix).unwrap();
    let none = vec![None; n];
    let r = rsa_similarity(&m, &t, &pairs, &none, 1, &human, Metric::Cosine).unwrap();
    assert_eq!(r.n_cells, 15);
    assert!(r.ci.is_some() && (-1.0..=1.0).contains(&r.r));
    let mut swapped = pairs.clone();
    swapped.swap(0, 1);
    assert!(rsa_similarity(&m, &t, &swapped, &none, 1, &human, Metric::Cosine).is_err());
    assert!(rsa_activations(&m, &t, &pairs, &none, 2).is_err());
    assert_eq!(rsa_activations(&m, &t, &pairs, &none, 0).unwrap()[0].len(), 2 * 16);
}

#[test]
fn decode_probe_with_zero_vector_decodes_the_blank_state() {
    let m = tiny_model(1);
    let t = template();
    let zero = FunctionVector::zeros("forward", 0, Provenance::Initial, 16);
    let probe = decode_probe(&m, &t, &zero, m.vocab().len()).unwrap();
    let blank = build_zero_shot_prompt(m.vocab(), &t, "").unwrap().tokens;
    let item = BatchItem {
        tokens: &blank,
        interventions: Vec::new(),
    };
    let r = m.final_readouts(std::slice::from_ref(&item), true).unwrap().remove(0);
    let dist = m.decode_from_layer(r.hidden(m.config(), 0), 1).unwrap();
    let total: f64 = probe.iter().map(|(_, p)| p).sum();
    assert!((total - 1.0).abs() < 1e-9);
    for (tok, p) in &probe {
        let id = m.vocab().id(tok).unwrap() as usize;
        assert_eq!(dist[id], *p);
    }
    assert!(probe.windows(2).all(|w| w[0].1 >= w[1].1));
    let shifted = decode_probe(&m, &t, &fv(0, 5.0), m.vocab().len()).unwrap();
    let shifted: Vec<f64> = shifted
        .iter()
        .map(|(t, p)| dist[m.vocab().id(t).unwrap() as usize] - p)
        .collect();
    assert!(shifted.iter().any(|d| d.abs() > 1e-6));
    assert_eq!(decode_probe(&m, &t, &zero, 3).unwrap().len(), 3);
}

#[test]
fn summary_averages_per_condition_and_task() {
    let m = tiny_model(1);
    let t = template();
    let ctx = EvalContext::new(&m, &t, 0, "cfg");
    let mut a = eval_zero_shot(&ctx, &tiny_relation("forward"), None, Condition::Baseline, 1).unwrap();
    let mut b = a.clone();
    a.accuracy = 0.25;
    b.accuracy = 0.75;
    let mut c = a.clone();
    c.condition = Condition::Ffv;
    c.task = TaskKind::ShuffledLabel;
    c.accuracy = 1.0;
    let csv = summary_csv(&[a, b, c]).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "condition,shuffled-label,zero-shot");
    assert_eq!(lines[1], "baseline,,0.500000");
    assert_eq!(lines[2], "ffv,1.000000,");
}

#[test]
fn condition_names_round_trip() {
    for c in Condition::ALL {
        assert_eq!(Condition::parse(c.name()).unwrap(), c);
    }
    assert!(Condition::parse("nope").is_err());
}

#[test]
fn report_json_round_trip() {
    let m = tiny_model(1);
    let t = template();
    let ctx = EvalContext::new(&m, &t, 7, "abc");
    let r = eval_zero_shot(&ctx, &tiny_relation("forward"), None, Condition::Baseline, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.json");
    r.save_json(&p).unwrap();
    let back: EvalReport = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
    assert_eq!(back, r);
    assert_eq!((back.seed, back.config_digest.as_str()), (7, "abc"));
}

#[test]
fn zero_shot_icl_matches_baseline_report() {
    let m = tiny_model(2);
    let t = template();
    let ctx = EvalContext::new(&m, &t, 3, "d");
    let rel = tiny_relation("forward");
    let base = eval_zero_shot(&ctx, &rel, None, Condition::Baseline, 1)
        .unwrap()
        .accuracy;
    assert_eq!(icl_accuracy(&m, &t, &rel, &rel, 0, 3).unwrap(), base);
    let a = icl_accuracy(&m, &t, &rel, &rel, 3, 4).unwrap();
    assert_eq!(a, icl_accuracy(&m, &t, &rel, &rel, 3, 4).unwrap());
    assert!((0.0..=1.0).contains(&a));
    assert!(matches!(
        icl_accuracy(&m, &t, &rel, &rel, rel.len(), 4),
        Err(Error::Data(_))
    ));
}
