//! Relation datasets: ordered word pairs plus deterministic splits.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WordPair {
    pub input: String,
    pub output: String,
}

impl WordPair {
    pub fn new(input: impl Into<String>, output: impl Into<String>) -> Self {
        WordPair {
            input: input.into(),
            output: output.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    #[default]
    SimpleTask,
    ComplexTask,
    Semeval,
    Google,
    Msr,
    Synthetic,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Family::SimpleTask => "simple-task",
            Family::ComplexTask => "complex-task",
            Family::Semeval => "semeval",
            Family::Google => "google",
            Family::Msr => "msr",
            Family::Synthetic => "synthetic",
        };
        f.write_str(s)
    }
}

/// On-disk relation file.
#[derive(Debug, Serialize, Deserialize)]
struct RelationFile {
    relation: String,
    #[serde(default)]
    family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    relation_type: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    paradigm: Vec<WordPair>,
    pairs: Vec<WordPair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationDataset {
    pub relation_id: String,
    pub family: Family,
    pub relation_type: Option<String>,
    pub pairs: Vec<WordPair>,
    pub paradigm_pairs: Vec<WordPair>,
}

impl RelationDataset {
    /// Validates and builds a dataset.
    pub fn new(relation_id: impl Into<String>, family: Family, pairs: Vec<WordPair>) -> Result<Self> {
        let ds = RelationDataset {
            relation_id: relation_id.into(),
            family,
            relation_type: None,
            pairs,
            paradigm_pairs: Vec::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Data(format!("relation {:?} has no pairs", self.relation_id)));
        }
        let mut seen = HashSet::new();
        for p in &self.pairs {
            if p.input.trim().is_empty() {
                return Err(Error::Data(format!(
                    "relation {:?} has an empty input",
                    self.relation_id
                )));
            }
            if !seen.insert(p) {
                return Err(Error::Data(format!(
                    "relation {:?} repeats pair {} -> {}",
                    self.relation_id, p.input, p.output
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn with_pairs(&self, pairs: Vec<WordPair>) -> Self {
        RelationDataset {
            relation_id: self.relation_id.clone(),
            family: self.family,
            relation_type: self.relation_type.clone(),
            pairs,
            paradigm_pairs: self.paradigm_pairs.clone(),
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: RelationFile = serde_json::from_str(text)?;
        let ds = RelationDataset {
            relation_id: file.relation,
            family: file.family,
            relation_type: file.relation_type,
            pairs: file.pairs,
            paradigm_pairs: file.paradigm,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn to_json_string(&self) -> Result<String> {
        let file = RelationFile {
            relation: self.relation_id.clone(),
            family: self.family,
            relation_type: self.relation_type.clone(),
            paradigm: self.paradigm_pairs.clone(),
            pairs: self.pairs.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }
}

/// Loads a relation file, keeping pairs in file order.
pub fn load_relation_file(path: impl AsRef<Path>) -> Result<RelationDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RelationDataset::from_json_str(&text)
}

pub fn save_relation_file(ds: &RelationDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ds.to_json_string()?).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub extract: f64,
    pub finetune: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            extract: 0.7,
            finetune: 0.1,
            test: 0.2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.extract, self.finetune, self.test];
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {f:?} must be in [0,1] and sum to 1"
            )));
        }
        Ok(())
    }
}

/// Size of the SemEval fine-tuning subset.
pub const SEMEVAL_FINETUNE_PAIRS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationSplits {
    pub extract: RelationDataset,
    pub finetune: RelationDataset,
    pub test: RelationDataset,
}

/// Shuffles under the split seed and cuts into extract / finetune / test.
///
/// SemEval-family relations get exactly ten fine-tuning pairs and a test
/// subset of three to five pairs; the rest goes to extraction.
pub fn split_relation(ds: &RelationDataset, spec: &SplitSpec) -> Result<RelationSplits> {
    spec.validate()?;
    let n = ds.len();
    let (n_ft, n_test) = if ds.family == Family::Semeval {
        let test = ((n as f64 * spec.test).round() as usize).clamp(3, 5);
        (SEMEVAL_FINETUNE_PAIRS, test)
    } else {
        (
            (n as f64 * spec.finetune).round() as usize,
            (n as f64 * spec.test).round() as usize,
        )
    };
    if n_ft == 0 || n_test == 0 || n_ft + n_test >= n {
        return Err(Error::Data(format!(
            "relation {:?} has {n} pairs, too few for nonempty splits",
            ds.relation_id
        )));
    }
    let mut pairs = ds.pairs.clone();
    pairs.shuffle(&mut seeded(spec.seed, &["split", &ds.relation_id]));
    let test = pairs.split_off(n - n_test);
    let finetune = pairs.split_off(pairs.len() - n_ft);
    Ok(RelationSplits {
        extract: ds.with_pairs(pairs),
        finetune: ds.with_pairs(finetune),
        test: ds.with_pairs(test),
    })
}

/// Pools the extract splits of several relations (e.g. all SemEval
/// relations of one type) into a single extraction dataset.
pub fn pool_extract_splits(id: &str, splits: &[&RelationSplits]) -> Result<RelationDataset> {
    let first = splits.first().ok_or_else(|| Error::Data("no splits to pool".into()))?;
    let mut seen = HashSet::new();
    let pairs: Vec<WordPair> = splits
        .iter()
        .flat_map(|s| s.extract.pairs.iter().cloned())
        .filter(|p| seen.insert(p.clone()))
        .collect();
    let mut ds = first.extract.with_pairs(pairs);
    ds.relation_id = id.to_string();
    ds.validate()?;
    Ok(ds)
}
