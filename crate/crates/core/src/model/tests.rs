use super::*;
use crate::data::TrainingSequence;
use proptest::prelude::*;

use crate::testutil::{max_abs_diff, tiny_config};

fn tiny_model() -> TransformerModel {
    let vocab = Vocabulary::from_words(["a", "b", "c", "d", "e", "f"]).unwrap();
    TransformerModel::init(tiny_config(vocab.len()), vocab).unwrap()
}

const PROMPT: [u32; 7] = [0, 8, 2, 1, 9, 3, 0];

#[test]
fn config_validation() {
    let mut c = ModelConfig::toy(10);
    assert!(c.validate().is_ok());
    c.d_head = 16;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::toy(10);
    c.n_layers = 1;
    assert!(c.validate().is_err());
}

#[test]
fn zero_add_is_identity() {
    let m = tiny_model();
    let base = m.forward(&PROMPT, &[], &RecordSpec::default()).unwrap();
    for l in 0..2 {
        let iv = InterventionSpec::add(l, vec![0.0; 16]);
        let out = m.forward(&PROMPT, &[iv], &RecordSpec::default()).unwrap();
        assert!(max_abs_diff(base.logits.data(), out.logits.data()) <= 1e-12);
    }
}

#[test]
fn self_replacement_is_identity() {
    let m = tiny_model();
    let base = m.forward(&PROMPT, &[], &RecordSpec::final_heads()).unwrap();
    let last = PROMPT.len() - 1;
    for l in 0..2 {
        for j in 0..2 {
            let own = base.record.head(l, j, last).unwrap().to_vec();
            let out = m
                .forward(
                    &PROMPT,
                    &[InterventionSpec::replace_head(l, j, own)],
                    &RecordSpec::default(),
                )
                .unwrap();
            assert!(max_abs_diff(base.logits.data(), out.logits.data()) <= 1e-12);
        }
    }
}

#[test]
fn add_mode_reads_back_as_h_plus_v() {
    let m = tiny_model();
    let base = m.forward(&PROMPT, &[], &RecordSpec::final_hidden()).unwrap();
    let v: Vec<f64> = (0..16).map(|i| 0.1 * i as f64 - 0.5).collect();
    let out = m
        .forward(
            &PROMPT,
            &[InterventionSpec::add(1, v.clone())],
            &RecordSpec::final_hidden(),
        )
        .unwrap();
    let last = PROMPT.len() - 1;
    let h = base.record.hidden(1, last).unwrap();
    let hv = out.record.hidden(1, last).unwrap();
    for i in 0..16 {
        assert_eq!(hv[i], h[i] + v[i]);
    }
}

fn layer_norm(x: &[f64], g: &Tensor, b: &Tensor) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let s = (var + crate::autodiff::LAYER_NORM_EPS).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / s * g.data()[i] + b.data()[i])
        .collect()
}

fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..w.cols())
        .map(|c| b.data()[c] + x.iter().enumerate().map(|(r, v)| v * w.get2(r, c)).sum::<f64>())
        .collect()
}

/// Plain-loop multi-head attention with concatenated heads, used as an
/// oracle for the per-head decomposition.
fn naive_attention(input: &[Vec<f64>], lw: &LayerWeights, n_heads: usize, dh: usize) -> Vec<Vec<f64>> {
    let a: Vec<Vec<f64>> = input.iter().map(|x| layer_norm(x, &lw.ln1_g, &lw.ln1_b)).collect();
    let q: Vec<Vec<f64>> = a.iter().map(|x| affine(x, &lw.wq, &lw.bq)).collect();
    let k: Vec<Vec<f64>> = a.iter().map(|x| affine(x, &lw.wk, &lw.bk)).collect();
    let v: Vec<Vec<f64>> = a.iter().map(|x| affine(x, &lw.wv, &lw.bv)).collect();
    let mut out = Vec::new();
    for t in 0..input.len() {
        let mut concat = vec![0.0; n_heads * dh];
        for h in 0..n_heads {
            let r = h * dh..(h + 1) * dh;
            let scores: Vec<f64> = (0..=t)
                .map(|s| crate::tensor::dot(&q[t][r.clone()], &k[s][r.clone()]) / (dh as f64).sqrt())
                .collect();
            let p = softmax(&scores);
            for (s, ps) in p.iter().enumerate() {
                for c in r.clone() {
                    concat[c] += ps * v[s][c];
                }
            }
        }
        out.push(affine(&concat, &lw.wo, &lw.bo));
    }
    out
}

#[test]
fn head_contributions_sum_to_attention_output() {
    let m = tiny_model();
    let spec = RecordSpec {
        positions: RecordPositions::All,
        heads: true,
        hidden: true,
    };
    let out = m.forward(&PROMPT, &[], &spec).unwrap();
    let w = m.weights();
    let n = PROMPT.len();
    for l in 0..2 {
        let input: Vec<Vec<f64>> = (0..n)
            .map(|t| {
                if l == 0 {
                    let e = m.embedding_table().row(PROMPT[t] as usize);
                    e.iter().zip(w.positions.row(t)).map(|(a, b)| a + b).collect()
                } else {
                    out.record.hidden(l - 1, t).unwrap().to_vec()
                }
            })
            .collect();
        let oracle = naive_attention(&input, &w.layers[l], 2, 8);
        for t in 0..n {
            let mut sum = w.layers[l].bo.data().to_vec();
            for j in 0..2 {
                let c = out.record.head(l, j, t).unwrap();
                sum.iter_mut().zip(c).for_each(|(s, x)| *s += x);
            }
            assert!(max_abs_diff(&sum, &oracle[t]) <= 1e-9);
        }
    }
}

#[test]
fn causal_mask() {
    let m = tiny_model();
    let a = m.forward(&[0, 8, 2, 9, 10], &[], &RecordSpec::default()).unwrap();
    let b = m.forward(&[0, 8, 2, 11, 12], &[], &RecordSpec::default()).unwrap();
    for t in 0..3 {
        assert_eq!(a.logits.row(t), b.logits.row(t));
    }
    assert_ne!(a.logits.row(3), b.logits.row(3));
}

#[test]
fn batched_readout_matches_single() {
    let m = tiny_model();
    let p1: Vec<u32> = vec![0, 8, 2, 1];
    let p2: Vec<u32> = vec![0, 9, 2, 1];
    let p3: Vec<u32> = vec![0, 9, 2, 1, 10];
    let v = vec![0.3; 16];
    let items = vec![
        BatchItem {
            tokens: &p1,
            interventions: vec![],
        },
        BatchItem {
            tokens: &p3,
            interventions: vec![],
        },
        BatchItem {
            tokens: &p2,
            interventions: vec![InterventionSpec::add(0, v.clone())],
        },
    ];
    let batched = m.final_distributions(&items).unwrap();
    let single = [
        m.next_token_distribution(&p1, &[]).unwrap(),
        m.next_token_distribution(&p3, &[]).unwrap(),
        m.next_token_distribution(&p2, &[InterventionSpec::add(0, v)]).unwrap(),
    ];
    for (b, s) in batched.iter().zip(&single) {
        assert!(max_abs_diff(b, s) <= 1e-12);
    }
}

#[test]
fn distribution_is_normalized_and_matches_logits() {
    let m = tiny_model();
    let out = m.forward(&PROMPT, &[], &RecordSpec::default()).unwrap();
    let p = m.next_token_distribution(&PROMPT, &[]).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert_eq!(
        crate::tensor::argmax(&p),
        crate::tensor::argmax(out.logits.row(PROMPT.len() - 1))
    );
}

#[test]
fn uniform_logits_give_uniform_distribution() {
    // Zero final gain makes every logit equal to the (zero) bias projection.
    let m = tiny_model();
    let mut w = m.weights().clone();
    w.lnf_g = Tensor::zeros(&[1, 16]);
    let m = TransformerModel::new(m.config().clone(), m.vocab().clone(), w).unwrap();
    let p = m.next_token_distribution(&PROMPT, &[]).unwrap();
    let u = 1.0 / m.vocab().len() as f64;
    assert!(p.iter().all(|x| (x - u).abs() < 1e-12));
}

#[test]
fn errors_on_bad_interventions_and_lengths() {
    let m = tiny_model();
    assert!(m
        .forward(
            &PROMPT,
            &[InterventionSpec::add(2, vec![0.0; 16])],
            &RecordSpec::default()
        )
        .is_err());
    assert!(m
        .forward(
            &PROMPT,
            &[InterventionSpec::add(0, vec![0.0; 3])],
            &RecordSpec::default()
        )
        .is_err());
    assert!(m.next_token_distribution(&[0; 65], &[]).is_err());
    assert!(m.decode_from_layer(&[0.0; 3], 0).is_err());
}

#[test]
fn decode_from_next_layer_matches_forward_on_single_token() {
    let m = tiny_model();
    let tokens = [9u32];
    let out = m.forward(&tokens, &[], &RecordSpec::final_hidden()).unwrap();
    let plain = softmax(out.logits.row(0));
    for k in 0..2 {
        let h = out.record.hidden(k, 0).unwrap();
        let p = m.decode_from_layer(h, k + 1).unwrap();
        assert!(max_abs_diff(&p, &plain) <= 1e-12);
    }
}

#[test]
fn decode_with_all_layers_skipped_is_plain_unembed() {
    let m = tiny_model();
    let h: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
    let p = m.decode_from_layer(&h, 2).unwrap();
    let w = m.weights();
    let normed = layer_norm(&h, &w.lnf_g, &w.lnf_b);
    let logits: Vec<f64> = (0..m.vocab().len())
        .map(|t| crate::tensor::dot(&normed, m.embedding_table().row(t)))
        .collect();
    assert!(max_abs_diff(&p, &softmax(&logits)) <= 1e-12);
}

#[test]
fn forward_does_not_touch_weights() {
    let m = tiny_model();
    let before = m.weights_digest();
    m.forward(
        &PROMPT,
        &[InterventionSpec::add(1, vec![1.0; 16])],
        &RecordSpec::final_heads(),
    )
    .unwrap();
    m.decode_from_layer(&[0.5; 16], 0).unwrap();
    assert_eq!(before, m.weights_digest());
}

#[test]
fn memorizes_one_sequence() {
    let vocab = Vocabulary::from_words(["a", "b", "c", "d"]).unwrap();
    let seq = TrainingSequence {
        tokens: vec![0, 8, 2, 1, 9, 3, 0, 10, 2, 1, 11],
        targets: vec![None, None, None, Some(9), None, None, None, None, None, Some(11), None],
    };
    let cfg = tiny_config(vocab.len());
    let sched = PretrainSchedule {
        steps: 150,
        batch_size: 1,
        lr: 1e-2,
        min_lr: 1e-3,
        warmup: 10,
        ..Default::default()
    };
    let (model, log) = pretrain(&[seq], vocab, cfg, &sched).unwrap();
    assert!(log.tail_loss(1) < 0.01, "final loss {}", log.tail_loss(1));
    let p = model.next_token_distribution(&[0, 8, 2, 1], &[]).unwrap();
    assert_eq!(crate::tensor::argmax(&p), 9);
}

#[test]
fn pretraining_is_seeded() {
    let vocab = Vocabulary::from_words(["a", "b"]).unwrap();
    let seq = TrainingSequence {
        tokens: vec![0, 8, 2, 1, 9],
        targets: vec![None, None, None, Some(9), None],
    };
    let sched = PretrainSchedule {
        steps: 3,
        batch_size: 1,
        ..Default::default()
    };
    let run = |seed| {
        let mut cfg = tiny_config(vocab.len());
        cfg.seed = seed;
        pretrain(std::slice::from_ref(&seq), vocab.clone(), cfg, &sched)
            .unwrap()
            .0
            .weights_digest()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn empty_corpus_is_rejected() {
    let vocab = Vocabulary::from_words(["a"]).unwrap();
    let cfg = tiny_config(vocab.len());
    assert!(pretrain(&[], vocab, cfg, &PretrainSchedule::default()).is_err());
}

#[test]
fn checkpoint_roundtrip() {
    let m = tiny_model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.weights_digest(), m.weights_digest());
    assert_eq!(back.weights(), m.weights());
    let bytes = std::fs::read(&path).unwrap();
    save_checkpoint(&back, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn distributions_sum_to_one(tokens in proptest::collection::vec(0u32..14, 1..20)) {
        let m = tiny_model();
        let p = m.next_token_distribution(&tokens, &[]).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
    }
}
