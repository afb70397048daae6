//! Small fixtures shared by unit tests.

use crate::data::{Family, RelationDataset, Vocabulary, WordPair};
use crate::model::{ModelConfig, TransformerModel};

pub(crate) fn tiny_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_head: 8,
        d_mlp: 32,
        vocab_size,
        max_seq_len: 64,
        seed: 3,
    }
}

/// Words `x0..x11` and `y0..y11`.
pub(crate) fn tiny_vocab() -> Vocabulary {
    let words: Vec<String> = (0..12).flat_map(|i| [format!("x{i}"), format!("y{i}")]).collect();
    Vocabulary::from_words(words.iter().map(String::as_str)).unwrap()
}

/// `xi -> yi` ("forward") or `yi -> xi` ("backward").
pub(crate) fn tiny_relation(id: &str) -> RelationDataset {
    let pairs = (0..12)
        .map(|i| {
            let (x, y) = (format!("x{i}"), format!("y{i}"));
            if id == "backward" {
                WordPair::new(y, x)
            } else {
                WordPair::new(x, y)
            }
        })
        .collect();
    RelationDataset::new(id, Family::Synthetic, pairs).unwrap()
}

pub(crate) fn tiny_model(seed: u64) -> TransformerModel {
    let vocab = tiny_vocab();
    let mut cfg = tiny_config(vocab.len());
    cfg.seed = seed;
    TransformerModel::init(cfg, vocab).unwrap()
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
