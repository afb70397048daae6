use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cfv::AffineTrainConfig;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::eval::{Condition, Metric};
use crate::finetune::FineTuneConfig;
use crate::fv::ExtractionConfig;
use crate::model::{ModelConfig, PretrainSchedule};
use crate::prompts::PromptTemplate;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Use this checkpoint instead of the one `pretrain` writes.
    pub checkpoint: Option<PathBuf>,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = ModelConfig::toy(0);
        ModelSection {
            checkpoint: None,
            n_layers: t.n_layers,
            n_heads: t.n_heads,
            d_model: t.d_model,
            d_head: t.d_head,
            d_mlp: t.d_mlp,
            max_seq_len: t.max_seq_len,
            seed: t.seed,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_head: self.d_head,
            d_mlp: self.d_mlp,
            vocab_size,
            max_seq_len: self.max_seq_len,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub synthetic: SyntheticSpec,
    /// Extra relation files. They are split like the synthetic relations
    /// but never enter the pretraining corpus.
    pub relation_files: Vec<PathBuf>,
    /// Analogy problems evaluated alongside the held-out synthetic ones.
    pub analogy_file: Option<PathBuf>,
    /// Human dissimilarities for `rsa`; labels are `input:output`.
    pub similarity_file: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub conditions: Vec<Condition>,
    pub zero_shot_topk: usize,
    pub analogy_topk: usize,
    pub shots: usize,
    pub actadd_coefficient: f64,
    /// Held-out one-shot analogies drawn per relation from its test split.
    pub analogies_per_relation: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            conditions: Condition::ALL.to_vec(),
            zero_shot_topk: 1,
            analogy_topk: 5,
            shots: 10,
            actadd_coefficient: 5.0,
            analogies_per_relation: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RsaSection {
    pub metric: Metric,
    pub pairs_per_relation: usize,
    /// Defaults to the layer after the vectors' injection layer.
    pub read_layer: Option<usize>,
}

impl Default for RsaSection {
    fn default() -> Self {
        RsaSection {
            metric: Metric::Cosine,
            pairs_per_relation: 4,
            read_layer: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub k: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection { k: 5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Inclusive layer range; all layers when absent.
    pub layers: Option<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub prompt: PromptTemplate,
    pub model: ModelSection,
    pub pretrain: PretrainSchedule,
    pub data: DataSection,
    pub extract: ExtractionConfig,
    pub finetune: FineTuneConfig,
    /// Also fine-tune from random vectors of the same norm.
    pub random_init_control: bool,
    pub cfv: AffineTrainConfig,
    pub eval: EvalSection,
    pub rsa: RsaSection,
    pub decode: DecodeSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            prompt: PromptTemplate::default(),
            model: ModelSection::default(),
            pretrain: PretrainSchedule::default(),
            data: DataSection::default(),
            extract: ExtractionConfig::default(),
            finetune: FineTuneConfig::default(),
            random_init_control: false,
            cfv: AffineTrainConfig::default(),
            eval: EvalSection::default(),
            rsa: RsaSection::default(),
            decode: DecodeSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let mut paths: Vec<&PathBuf> = self.data.relation_files.iter().collect();
        paths.extend(self.data.analogy_file.iter());
        paths.extend(self.data.similarity_file.iter());
        paths.extend(self.model.checkpoint.iter());
        if let Some(p) = paths.iter().find(|p| !p.exists()) {
            return Err(Error::Config(format!("referenced path {} does not exist", p.display())));
        }
        self.data.synthetic.split.validate()?;
        self.model.model_config(1).validate()?;
        self.finetune.validate()?;
        let e = &self.eval;
        if e.conditions.is_empty() {
            return Err(Error::Config("eval.conditions is empty".into()));
        }
        if e.zero_shot_topk == 0 || e.analogy_topk == 0 || self.decode.k == 0 {
            return Err(Error::Config("top-k values must be positive".into()));
        }
        if e.shots < 2 {
            return Err(Error::Config("shuffled-label evaluation needs at least 2 shots".into()));
        }
        if let Some([a, b]) = self.sweep.layers {
            if a > b || b >= self.model.n_layers {
                return Err(Error::Config(format!(
                    "sweep layers {a}..{b} outside 0..{}",
                    self.model.n_layers - 1
                )));
            }
        }
        if self.extract.top_k == 0 || self.extract.top_k > self.model.n_layers * self.model.n_heads {
            return Err(Error::Config(format!(
                "extract.top_k {} out of range",
                self.extract.top_k
            )));
        }
        Ok(())
    }

    /// Configuration without the per-run keys (`seed`, `out_dir`) and the
    /// layer-sweep range, whose CSV rows name their layer, as JSON.
    pub fn shared_json(&self) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(self)?;
        if let Some(m) = v.as_object_mut() {
            m.remove("seed");
            m.remove("out_dir");
            m.remove("sweep");
        }
        Ok(v)
    }

    /// SHA-256 of [`Self::shared_json`]. Seeds of one protocol share it.
    pub fn digest(&self) -> Result<String> {
        let text = serde_json::to_string(&self.shared_json()?)?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }
}
