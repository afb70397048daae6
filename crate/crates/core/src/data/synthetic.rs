//! A closed synthetic word world for desk-scale pretraining.
//!
//! Nine categories of sixteen words each appear in four surface forms
//! (lower, upper, plural, reversed). Every word token is embedded as the
//! sum of four features: category, slot (index mod 8), pole (index div 8)
//! and form. A held-out pair such as `paris -> PARIS` or `hot -> cold` is
//! therefore built entirely from features the model saw during
//! pretraining.

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use super::relation::{split_relation, Family, RelationDataset, RelationSplits, SplitSpec, WordPair};
use super::vocab::{VocabBuilder, Vocabulary};
use crate::error::{Error, Result};
use crate::prompts::PromptTemplate;
use crate::rng::seeded;

pub const WORDS_PER_CATEGORY: usize = 16;

pub struct Category {
    pub name: &'static str,
    pub words: [&'static str; WORDS_PER_CATEGORY],
}

pub const CATEGORIES: [Category; 9] = [
    Category {
        name: "number",
        words: [
            "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
            "thirteen", "fourteen", "fifteen", "sixteen",
        ],
    },
    Category {
        name: "ordinal",
        words: [
            "first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth", "tenth", "eleventh",
            "twelfth", "thirteenth", "fourteenth", "fifteenth", "sixteenth",
        ],
    },
    Category {
        name: "country",
        words: [
            "france", "japan", "egypt", "chile", "italy", "spain", "peru", "kenya", "india", "china", "brazil",
            "canada", "greece", "norway", "sweden", "poland",
        ],
    },
    Category {
        name: "capital",
        words: [
            "paris", "tokyo", "cairo", "santiago", "rome", "madrid", "lima", "nairobi", "delhi", "beijing", "brasilia",
            "ottawa", "athens", "oslo", "stockholm", "warsaw",
        ],
    },
    Category {
        name: "animal",
        words: [
            "cat", "dog", "cow", "sheep", "horse", "goat", "pig", "duck", "goose", "frog", "bear", "deer", "hen",
            "swan", "kangaroo", "owl",
        ],
    },
    Category {
        name: "young",
        words: [
            "kitten", "puppy", "calf", "lamb", "foal", "kid", "piglet", "duckling", "gosling", "tadpole", "cub",
            "fawn", "chick", "cygnet", "joey", "owlet",
        ],
    },
    Category {
        name: "job",
        words: [
            "chef", "painter", "writer", "farmer", "doctor", "carpenter", "tailor", "barber", "gardener", "fisher",
            "pilot", "drummer", "miner", "baker", "surgeon", "sailor",
        ],
    },
    Category {
        name: "tool",
        words: [
            "knife", "brush", "pen", "plow", "stethoscope", "hammer", "needle", "scissors", "rake", "rod", "plane",
            "drum", "pickaxe", "oven", "scalpel", "boat",
        ],
    },
    // Index i and i + 8 are antonyms.
    Category {
        name: "adjective",
        words: [
            "new", "tall", "rich", "hot", "big", "fast", "happy", "black", "old", "short", "poor", "cold", "small",
            "slow", "sad", "white",
        ],
    },
];

/// Category pairs linked by the counterpart relation, at equal index.
pub const COUNTERPARTS: [(&str, &str); 4] = [
    ("country", "capital"),
    ("number", "ordinal"),
    ("animal", "young"),
    ("job", "tool"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Form {
    Lower,
    Upper,
    Plural,
    Reversed,
}

impl Form {
    pub const ALL: [Form; 4] = [Form::Lower, Form::Upper, Form::Plural, Form::Reversed];

    fn name(self) -> &'static str {
        match self {
            Form::Lower => "lower",
            Form::Upper => "upper",
            Form::Plural => "plural",
            Form::Reversed => "reversed",
        }
    }

    pub fn apply(self, word: &str) -> String {
        match self {
            Form::Lower => word.to_string(),
            Form::Upper => word.to_uppercase(),
            Form::Plural => format!("{word}s"),
            Form::Reversed => word.chars().rev().collect(),
        }
    }
}

pub const GENERATORS: [&str; 10] = [
    "uppercase-map",
    "plural-rule",
    "reverse-word",
    "successor",
    "antonym-lookup",
    "capital-lookup",
    "antonym-upper",
    "antonym-plural",
    "antonym-reverse",
    "category-label",
];

/// The default relation set. Each relation shares its input and output
/// forms with at least one other, so a shuffled-label prompt reveals the
/// output form but not the word mapping. `category-label` has no such
/// partner and is left out.
pub const DEFAULT_GENERATORS: [&str; 9] = [
    "uppercase-map",
    "plural-rule",
    "reverse-word",
    "successor",
    "antonym-lookup",
    "capital-lookup",
    "antonym-upper",
    "antonym-plural",
    "antonym-reverse",
];

/// The world's vocabulary: specials, every word in every form, and one
/// label token per category.
pub fn world_vocabulary() -> Result<Vocabulary> {
    let mut b = VocabBuilder::new();
    for cat in &CATEGORIES {
        let cat_f = format!("cat:{}", cat.name);
        for (i, w) in cat.words.iter().enumerate() {
            let slot_f = format!("slot:{}", i % 8);
            let pole_f = format!("pole:{}", i / 8);
            for form in Form::ALL {
                let form_f = format!("form:{}", form.name());
                b.push(&form.apply(w), &[&cat_f, &slot_f, &pole_f, &form_f])?;
            }
        }
    }
    for cat in &CATEGORIES {
        b.push(cat.name, &[&format!("cat:{}", cat.name), "form:label"])?;
    }
    Ok(b.build())
}

fn category(name: &str) -> &'static Category {
    CATEGORIES.iter().find(|c| c.name == name).expect("known category")
}

fn pairs_for(generator: &str) -> Result<Vec<WordPair>> {
    let mut pairs = Vec::new();
    let every_word = || CATEGORIES.iter().flat_map(|c| c.words.iter().map(move |w| (c, *w)));
    match generator {
        "uppercase-map" | "plural-rule" | "reverse-word" => {
            let form = match generator {
                "uppercase-map" => Form::Upper,
                "plural-rule" => Form::Plural,
                _ => Form::Reversed,
            };
            pairs.extend(every_word().map(|(_, w)| WordPair::new(w, form.apply(w))));
        }
        "successor" => {
            for c in &CATEGORIES {
                pairs.extend(c.words.windows(2).map(|w| WordPair::new(w[0], w[1])));
            }
        }
        "antonym-lookup" | "antonym-upper" | "antonym-plural" | "antonym-reverse" => {
            let form = match generator {
                "antonym-upper" => Form::Upper,
                "antonym-plural" => Form::Plural,
                "antonym-reverse" => Form::Reversed,
                _ => Form::Lower,
            };
            for c in &CATEGORIES {
                pairs.extend((0..WORDS_PER_CATEGORY).map(|i| WordPair::new(c.words[i], form.apply(c.words[i ^ 8]))));
            }
        }
        "capital-lookup" => {
            for (from, to) in COUNTERPARTS {
                let (f, t) = (category(from), category(to));
                pairs.extend(f.words.iter().zip(&t.words).map(|(a, b)| WordPair::new(*a, *b)));
            }
        }
        "category-label" => {
            pairs.extend(every_word().map(|(c, w)| WordPair::new(w, c.name)));
        }
        other => return Err(Error::Data(format!("unknown synthetic generator {other:?}"))),
    }
    Ok(pairs)
}

pub fn generate_relation(generator: &str) -> Result<RelationDataset> {
    let mut ds = RelationDataset::new(generator, Family::Synthetic, pairs_for(generator)?)?;
    if generator == "category-label" {
        ds.relation_type = Some("classification".into());
    }
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub generators: Vec<String>,
    pub split: SplitSpec,
    /// Demonstrations before the final pair of every corpus sequence.
    pub shots: usize,
    pub sequences_per_relation: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            generators: DEFAULT_GENERATORS.iter().map(|g| g.to_string()).collect(),
            split: SplitSpec::default(),
            shots: 10,
            sequences_per_relation: 4000,
        }
    }
}

/// One pretraining sequence. `targets[t]` is the token to predict after
/// position `t`; only answer tokens are supervised.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSequence {
    pub tokens: Vec<u32>,
    pub targets: Vec<Option<u32>>,
}

pub struct SyntheticBundle {
    pub vocab: Vocabulary,
    pub relations: Vec<RelationDataset>,
    pub splits: Vec<RelationSplits>,
    pub corpus: Vec<TrainingSequence>,
}

impl SyntheticBundle {
    pub fn splits_for(&self, relation: &str) -> Option<&RelationSplits> {
        self.splits.iter().find(|s| s.extract.relation_id == relation)
    }
}

/// Formats demonstrations into one supervised sequence.
pub fn training_sequence(
    vocab: &Vocabulary,
    template: &PromptTemplate,
    pairs: &[WordPair],
) -> Result<TrainingSequence> {
    let mut tokens = Vec::new();
    let mut targets = Vec::new();
    for p in pairs {
        let (toks, answer) = template.pair_tokens(vocab, p)?;
        let base = tokens.len();
        tokens.extend_from_slice(&toks);
        targets.resize(tokens.len(), None);
        targets[base + answer - 1] = Some(toks[answer]);
    }
    Ok(TrainingSequence { tokens, targets })
}

/// Builds the relations, their splits, and a corpus of `shots + 1`-pair
/// sequences drawn from extract splits only, interleaved across relations.
pub fn generate_synthetic_relations(seed: u64, spec: &SyntheticSpec) -> Result<SyntheticBundle> {
    let vocab = world_vocabulary()?;
    let relations = spec
        .generators
        .iter()
        .map(|g| generate_relation(g))
        .collect::<Result<Vec<_>>>()?;
    let splits = relations
        .iter()
        .map(|r| split_relation(r, &spec.split))
        .collect::<Result<Vec<_>>>()?;
    let per_seq = spec.shots + 1;
    if let Some(s) = splits.iter().find(|s| s.extract.len() < per_seq) {
        return Err(Error::Data(format!(
            "relation {:?} has {} extract pairs, fewer than {per_seq} per sequence",
            s.extract.relation_id,
            s.extract.len()
        )));
    }
    let template = PromptTemplate::default();
    let mut rng = seeded(seed, &["corpus"]);
    let mut corpus = Vec::with_capacity(spec.sequences_per_relation * splits.len());
    for _ in 0..spec.sequences_per_relation {
        for s in &splits {
            let picked: Vec<WordPair> = s.extract.pairs.choose_multiple(&mut rng, per_seq).cloned().collect();
            corpus.push(training_sequence(&vocab, &template, &picked)?);
        }
    }
    Ok(SyntheticBundle {
        vocab,
        relations,
        splits,
        corpus,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeSet, HashSet};

    fn pair_of(ds: &RelationDataset, input: &str) -> String {
        ds.pairs.iter().find(|p| p.input == input).unwrap().output.clone()
    }

    #[test]
    fn rules() {
        assert_eq!(pair_of(&generate_relation("uppercase-map").unwrap(), "paris"), "PARIS");
        assert_eq!(pair_of(&generate_relation("successor").unwrap(), "one"), "two");
        assert_eq!(pair_of(&generate_relation("antonym-lookup").unwrap(), "tall"), "short");
        assert_eq!(
            pair_of(&generate_relation("capital-lookup").unwrap(), "chile"),
            "santiago"
        );
        assert_eq!(pair_of(&generate_relation("plural-rule").unwrap(), "dog"), "dogs");
        assert_eq!(pair_of(&generate_relation("reverse-word").unwrap(), "pen"), "nep");
        assert_eq!(pair_of(&generate_relation("category-label").unwrap(), "owl"), "animal");
        assert_eq!(pair_of(&generate_relation("antonym-upper").unwrap(), "hot"), "COLD");
        assert_eq!(pair_of(&generate_relation("antonym-plural").unwrap(), "cat"), "gooses");
        assert_eq!(pair_of(&generate_relation("antonym-reverse").unwrap(), "rich"), "roop");
        assert!(generate_relation("rhyme").is_err());
    }

    #[test]
    fn relations_are_large_and_single_token() {
        let vocab = world_vocabulary().unwrap();
        assert_eq!(vocab.n_features(), 8 + 9 + 8 + 2 + 5);
        for g in GENERATORS {
            let ds = generate_relation(g).unwrap();
            assert!(ds.len() >= 60, "{g}");
            for p in &ds.pairs {
                assert_eq!(vocab.tokenize(&p.input).unwrap().len(), 1);
                assert_eq!(vocab.tokenize(&p.output).unwrap().len(), 1);
            }
        }
    }

    #[test]
    fn every_default_relation_has_a_form_sibling() {
        let vocab = world_vocabulary().unwrap();
        let form = |w: &str| -> usize {
            let id = vocab.id(w).unwrap() as usize;
            let names = vocab.feature_names();
            *vocab.feature_lists()[id]
                .iter()
                .find(|&&f| names[f].starts_with("form:"))
                .unwrap()
        };
        let signature = |g: &str| -> BTreeSet<(usize, usize)> {
            generate_relation(g)
                .unwrap()
                .pairs
                .iter()
                .map(|p| (form(&p.input), form(&p.output)))
                .collect()
        };
        for g in DEFAULT_GENERATORS {
            let sig = signature(g);
            let siblings: Vec<&str> = DEFAULT_GENERATORS
                .iter()
                .copied()
                .filter(|&h| h != g && signature(h) == sig)
                .collect();
            assert!(!siblings.is_empty(), "{g} has no sibling");
        }
        assert!(GENERATORS.contains(&"category-label"));
        assert!(!DEFAULT_GENERATORS
            .iter()
            .any(|&h| signature(h) == signature("category-label")));
    }

    #[test]
    fn corpus_only_contains_extract_pairs() {
        let spec = SyntheticSpec {
            sequences_per_relation: 50,
            ..Default::default()
        };
        let b = generate_synthetic_relations(1, &spec).unwrap();
        assert_eq!(b.corpus.len(), 50 * DEFAULT_GENERATORS.len());
        let held_out: HashSet<(u32, u32)> = b
            .splits
            .iter()
            .flat_map(|s| s.finetune.pairs.iter().chain(&s.test.pairs))
            .map(|p| (b.vocab.id(&p.input).unwrap(), b.vocab.id(&p.output).unwrap()))
            .collect();
        for seq in &b.corpus {
            assert_eq!(seq.tokens.len(), 66);
            for (t, target) in seq.targets.iter().enumerate() {
                if let Some(y) = target {
                    assert_eq!(seq.tokens[t + 1], *y);
                    let x = seq.tokens[t - 2];
                    assert!(!held_out.contains(&(x, *y)));
                }
            }
            assert_eq!(seq.targets.iter().flatten().count(), 11);
        }
        let text = b.vocab.detokenize(&b.corpus[0].tokens);
        assert_eq!(b.vocab.detokenize(&b.vocab.tokenize(&text).unwrap()), text);
    }

    #[test]
    fn corpus_is_seeded() {
        let spec = SyntheticSpec {
            sequences_per_relation: 3,
            ..Default::default()
        };
        let a = generate_synthetic_relations(5, &spec).unwrap();
        let b = generate_synthetic_relations(5, &spec).unwrap();
        let c = generate_synthetic_relations(6, &spec).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_ne!(a.corpus, c.corpus);
    }
}
