//! Closed word-level vocabulary and the whitespace tokenizer.
//!
//! Text is split into newline tokens (`"\n"`, `"\n\n"`) and space-separated
//! words. An empty word between two spaces is the `<blank>` token, which
//! detokenizes to the empty string, so `"tall : short ::  :"` round-trips.
//!
//! Each token also carries a list of embedding feature ids. A plain
//! vocabulary gives every token its own feature; the synthetic world gives
//! words shared features (category, index, surface form) so that a token's
//! embedding is the sum of its feature rows.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const QUERY: &str = "Q:";
pub const ANSWER: &str = "A:";
pub const NEWLINE: &str = "\n";
pub const PARAGRAPH: &str = "\n\n";
pub const COLON: &str = ":";
pub const DOUBLE_COLON: &str = "::";
pub const BLANK: &str = "<blank>";
pub const UNK: &str = "<unk>";

/// Tokens every vocabulary starts with, in id order.
pub const SPECIALS: [&str; 8] = [QUERY, ANSWER, NEWLINE, PARAGRAPH, COLON, DOUBLE_COLON, BLANK, UNK];

#[derive(Clone, Debug, Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    feature_names: Vec<String>,
    features: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    feature_names: Vec<String>,
    features: Vec<Vec<usize>>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.feature_names == other.feature_names && self.features == other.features
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr {
            tokens: v.tokens,
            feature_names: v.feature_names,
            features: v.features,
        }
    }
}

impl TryFrom<VocabRepr> for Vocabulary {
    type Error = Error;
    fn try_from(r: VocabRepr) -> Result<Self> {
        if r.tokens.len() != r.features.len() {
            return Err(Error::Data("vocabulary feature table length mismatch".into()));
        }
        if r.features.iter().flatten().any(|&f| f >= r.feature_names.len()) {
            return Err(Error::Data("vocabulary feature id out of range".into()));
        }
        let mut index = HashMap::with_capacity(r.tokens.len());
        for (i, t) in r.tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary {
            tokens: r.tokens,
            index,
            feature_names: r.feature_names,
            features: r.features,
        })
    }
}

/// Incrementally assembles a [`Vocabulary`] with named features.
#[derive(Default)]
pub struct VocabBuilder {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    feature_names: Vec<String>,
    feature_index: HashMap<String, usize>,
    features: Vec<Vec<usize>>,
}

impl VocabBuilder {
    /// Starts with the special tokens, each with a private feature.
    pub fn new() -> Self {
        let mut b = VocabBuilder::default();
        for s in SPECIALS {
            b.push_unique(s).expect("specials are distinct");
        }
        b
    }

    fn feature_id(&mut self, name: &str) -> usize {
        if let Some(&id) = self.feature_index.get(name) {
            return id;
        }
        let id = self.feature_names.len();
        self.feature_names.push(name.to_string());
        self.feature_index.insert(name.to_string(), id);
        id
    }

    /// Adds a token whose embedding is its own private feature.
    pub fn push_unique(&mut self, token: &str) -> Result<u32> {
        let f = format!("tok:{token}");
        self.push(token, &[f.as_str()])
    }

    /// Adds a token whose embedding is the sum of the named features.
    pub fn push(&mut self, token: &str, features: &[&str]) -> Result<u32> {
        if token.is_empty() || token.contains(' ') || (token.contains('\n') && !SPECIALS.contains(&token)) {
            return Err(Error::Data(format!("invalid token {token:?}")));
        }
        if self.index.contains_key(token) {
            return Err(Error::Data(format!("duplicate token {token:?}")));
        }
        if features.is_empty() {
            return Err(Error::Data(format!("token {token:?} has no features")));
        }
        let ids = features.iter().map(|f| self.feature_id(f)).collect();
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        self.features.push(ids);
        Ok(id)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn build(self) -> Vocabulary {
        Vocabulary {
            tokens: self.tokens,
            index: self.index,
            feature_names: self.feature_names,
            features: self.features,
        }
    }
}

impl Vocabulary {
    /// Specials plus the given words, each with a private feature.
    /// Repeated words are added once.
    pub fn from_words<'w>(words: impl IntoIterator<Item = &'w str>) -> Result<Self> {
        let mut b = VocabBuilder::new();
        for w in words {
            if !b.contains(w) {
                b.push_unique(w)?;
            }
        }
        Ok(b.build())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Per-token feature ids, indexed by token id.
    pub fn feature_lists(&self) -> &[Vec<usize>] {
        &self.features
    }

    pub fn special(&self, token: &str) -> u32 {
        self.id(token).expect("special tokens are always present")
    }

    fn lookup(&self, word: &str, strict: bool) -> Result<u32> {
        match self.id(word) {
            Some(id) => Ok(id),
            None if strict => Err(Error::UnknownToken(word.to_string())),
            None => Ok(self.special(UNK)),
        }
    }

    fn tokenize_inner(&self, text: &str, strict: bool) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        let mut segment_start = 0;
        let bytes = text.as_bytes();
        let mut i = 0;
        let flush = |seg: &str, out: &mut Vec<u32>| -> Result<()> {
            if seg.is_empty() {
                return Ok(());
            }
            for word in seg.split(' ') {
                if word.is_empty() {
                    out.push(self.special(BLANK));
                } else {
                    out.push(self.lookup(word, strict)?);
                }
            }
            Ok(())
        };
        while i < bytes.len() {
            if bytes[i] == b'\n' {
                flush(&text[segment_start..i], &mut out)?;
                let mut run = 0;
                while i < bytes.len() && bytes[i] == b'\n' {
                    run += 1;
                    i += 1;
                }
                for _ in 0..run / 2 {
                    out.push(self.special(PARAGRAPH));
                }
                if run % 2 == 1 {
                    out.push(self.special(NEWLINE));
                }
                segment_start = i;
            } else {
                i += 1;
            }
        }
        flush(&text[segment_start..], &mut out)?;
        Ok(out)
    }

    /// Tokenizes, failing on out-of-vocabulary words.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        self.tokenize_inner(text, true)
    }

    /// Tokenizes, mapping out-of-vocabulary words to `<unk>`.
    pub fn tokenize_lenient(&self, text: &str) -> Vec<u32> {
        self.tokenize_inner(text, false)
            .expect("lenient tokenization cannot fail")
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut in_segment = false;
        for &id in ids {
            let tok = self.token(id);
            if tok == NEWLINE || tok == PARAGRAPH {
                out.push_str(tok);
                in_segment = false;
                continue;
            }
            if in_segment {
                out.push(' ');
            }
            if tok != BLANK {
                out.push_str(tok);
            }
            in_segment = true;
        }
        out
    }

    /// First token of an answer string, the unit every scorer compares.
    pub fn first_token(&self, answer: &str) -> Result<u32> {
        let ids = self.tokenize(answer.trim())?;
        ids.first()
            .copied()
            .ok_or_else(|| Error::Data(format!("answer {answer:?} has no tokens")))
    }
}
