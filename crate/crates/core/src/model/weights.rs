use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// All trainable parameters. Token embeddings are factored: `features`
/// holds one row per embedding feature and a token's vector is the sum of
/// its feature rows. The unembedding is tied to the same table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub features: Tensor,
    pub positions: Tensor,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
}

pub(crate) struct LayerVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Weights registered on a tape, plus the token embedding table.
pub(crate) struct Bound {
    pub embed: Var,
    pub positions: Var,
    pub layers: Vec<LayerVars>,
    pub lnf_g: Var,
    pub lnf_b: Var,
}

fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

fn ones(n: usize) -> Tensor {
    Tensor::row_vector(vec![1.0; n])
}

fn zeros(n: usize) -> Tensor {
    Tensor::zeros(&[1, n])
}

impl LayerWeights {
    fn tensors(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

impl ModelWeights {
    /// GPT-2 style init: N(0, 0.02), residual projections scaled down by
    /// sqrt(2 * n_layers), unit layer-norm gains.
    pub fn init<R: Rng>(config: &ModelConfig, n_features: usize, rng: &mut R) -> Self {
        let d = config.d_model;
        let std = 0.02;
        let proj_std = std / (2.0 * config.n_layers as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_g: ones(d),
                ln1_b: zeros(d),
                wq: normal(rng, d, d, std),
                bq: zeros(d),
                wk: normal(rng, d, d, std),
                bk: zeros(d),
                wv: normal(rng, d, d, std),
                bv: zeros(d),
                wo: normal(rng, d, d, proj_std),
                bo: zeros(d),
                ln2_g: ones(d),
                ln2_b: zeros(d),
                w1: normal(rng, d, config.d_mlp, std),
                b1: zeros(config.d_mlp),
                w2: normal(rng, config.d_mlp, d, proj_std),
                b2: zeros(d),
            })
            .collect();
        ModelWeights {
            features: normal(rng, n_features, d, std),
            positions: normal(rng, config.max_seq_len, d, std / 2.0),
            layers,
            lnf_g: ones(d),
            lnf_b: zeros(d),
        }
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("features".to_string(), &self.features),
            ("positions".to_string(), &self.positions),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.tensors().into_iter().map(|(n, t)| (format!("layers.{l}.{n}"), t)));
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out
    }

    /// Mutable tensors in the same order as [`ModelWeights::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.features, &mut self.positions];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out
    }

    pub fn n_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over names, shapes and exact bit patterns.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            t.hash_into(&mut h);
        }
        hex::encode(h.finalize())
    }

    /// Token embedding table `[vocab, d_model]`.
    pub fn embedding_table(&self, feature_lists: &[Vec<usize>]) -> Tensor {
        let d = self.features.cols();
        let mut data = vec![0.0; feature_lists.len() * d];
        for (row, list) in data.chunks_mut(d).zip(feature_lists) {
            for &f in list {
                row.iter_mut().zip(self.features.row(f)).for_each(|(o, x)| *o += x);
            }
        }
        Tensor::matrix(feature_lists.len(), d, data).expect("sized")
    }

    fn bind_layers<'a>(&'a self, mut f: impl FnMut(&'a Tensor) -> Var) -> (Var, Vec<LayerVars>, Var, Var) {
        let positions = f(&self.positions);
        let layers = self
            .layers
            .iter()
            .map(|w| LayerVars {
                ln1_g: f(&w.ln1_g),
                ln1_b: f(&w.ln1_b),
                wq: f(&w.wq),
                bq: f(&w.bq),
                wk: f(&w.wk),
                bk: f(&w.bk),
                wv: f(&w.wv),
                bv: f(&w.bv),
                wo: f(&w.wo),
                bo: f(&w.bo),
                ln2_g: f(&w.ln2_g),
                ln2_b: f(&w.ln2_b),
                w1: f(&w.w1),
                b1: f(&w.b1),
                w2: f(&w.w2),
                b2: f(&w.b2),
            })
            .collect();
        let lnf_g = f(&self.lnf_g);
        let lnf_b = f(&self.lnf_b);
        (positions, layers, lnf_g, lnf_b)
    }

    /// Registers the weights as borrowed constants.
    pub(crate) fn bind_frozen<'a>(&'a self, tape: &mut Tape<'a>, embed: &'a Tensor) -> Bound {
        let embed = tape.constant(embed);
        let (positions, layers, lnf_g, lnf_b) = self.bind_layers(|t| tape.constant(t));
        Bound {
            embed,
            positions,
            layers,
            lnf_g,
            lnf_b,
        }
    }

    /// Registers copies of the weights as trainable leaves. The returned
    /// leaf list follows [`ModelWeights::named`] order.
    pub(crate) fn bind_trainable(
        &self,
        tape: &mut Tape<'_>,
        feature_lists: &[Vec<usize>],
    ) -> crate::error::Result<(Bound, Vec<Var>)> {
        let features = tape.leaf(self.features.clone());
        let mut leaves = vec![features];
        let (positions, layers, lnf_g, lnf_b) = self.bind_layers(|t| {
            let v = tape.leaf(t.clone());
            leaves.push(v);
            v
        });
        let embed = tape.gather_sum(features, feature_lists)?;
        Ok((
            Bound {
                embed,
                positions,
                layers,
                lnf_g,
                lnf_b,
            },
            leaves,
        ))
    }
}
