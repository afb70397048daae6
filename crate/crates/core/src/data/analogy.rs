use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Four-term analogy `a : b :: c : d`; `d` is the gold answer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnalogyProblem {
    pub a: String,
    pub b: String,
    pub c: String,
    pub d: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

impl AnalogyProblem {
    pub fn new(a: &str, b: &str, c: &str, d: &str, tag: Option<&str>) -> Self {
        AnalogyProblem {
            a: a.into(),
            b: b.into(),
            c: c.into(),
            d: d.into(),
            tag: tag.map(Into::into),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, term) in [("a", &self.a), ("b", &self.b), ("c", &self.c), ("d", &self.d)] {
            if term.trim().is_empty() {
                return Err(Error::Data(format!("analogy term {name} is empty")));
            }
        }
        Ok(())
    }
}

pub fn parse_analogies(text: &str) -> Result<Vec<AnalogyProblem>> {
    let problems: Vec<AnalogyProblem> = serde_json::from_str(text)?;
    for (i, p) in problems.iter().enumerate() {
        p.validate().map_err(|e| Error::Data(format!("analogy {i}: {e}")))?;
    }
    Ok(problems)
}

/// Loads a JSON array of analogies, preserving order and duplicates.
pub fn load_analogy_file(path: impl AsRef<Path>) -> Result<Vec<AnalogyProblem>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_analogies(&text)
}
