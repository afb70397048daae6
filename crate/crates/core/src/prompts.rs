//! Prompt construction with answer-position bookkeeping.
//!
//! Every prompt is scored at its last token: the model's next-token
//! distribution there is compared with the gold answer's first token.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AnalogyProblem, Vocabulary, WordPair};
use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub pair: String,
    pub query: String,
    pub analogy: String,
    pub blank: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            pair: "Q: {x}\nA: {y}\n\n".into(),
            query: "Q: {x}\nA:".into(),
            analogy: "{a} : {b} :: {c} :".into(),
            blank: "{a} : {b} ::  :".into(),
        }
    }
}

impl PromptTemplate {
    pub fn render_pair(&self, x: &str, y: &str) -> String {
        self.pair.replace("{x}", x).replace("{y}", y)
    }

    pub fn render_query(&self, x: &str) -> String {
        self.query.replace("{x}", x)
    }

    pub fn render_analogy(&self, a: &str, b: &str, c: &str) -> String {
        self.analogy.replace("{a}", a).replace("{b}", b).replace("{c}", c)
    }

    pub fn render_blank(&self, a: &str, b: &str) -> String {
        self.blank.replace("{a}", a).replace("{b}", b)
    }

    /// Tokens of one formatted demonstration and the offset of its answer.
    pub fn pair_tokens(&self, vocab: &Vocabulary, pair: &WordPair) -> Result<(Vec<u32>, usize)> {
        let full = vocab.tokenize(&self.render_pair(&pair.input, &pair.output))?;
        let prefix = vocab.tokenize(&self.render_query(&pair.input))?;
        if !full.starts_with(&prefix) || full.len() == prefix.len() {
            return Err(Error::Config(
                "the pair template must extend the query template with the answer".into(),
            ));
        }
        Ok((full, prefix.len()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMeta {
    pub relation: Option<String>,
    pub shots: usize,
    pub shuffled: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub tokens: Vec<u32>,
    pub answer_position: usize,
    pub meta: PromptMeta,
}

impl Prompt {
    fn from_text(vocab: &Vocabulary, text: &str, meta: PromptMeta) -> Result<Self> {
        let tokens = vocab.tokenize(text)?;
        if tokens.is_empty() {
            return Err(Error::Data("empty prompt".into()));
        }
        Ok(Prompt {
            answer_position: tokens.len() - 1,
            tokens,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// `n` demonstrations followed by the query. `n = 0` is the zero-shot prompt.
pub fn build_icl_prompt(
    vocab: &Vocabulary,
    template: &PromptTemplate,
    demos: &[WordPair],
    query: &str,
    relation: Option<&str>,
) -> Result<Prompt> {
    let mut text = String::new();
    for d in demos {
        text.push_str(&template.render_pair(&d.input, &d.output));
    }
    text.push_str(&template.render_query(query));
    let meta = PromptMeta {
        relation: relation.map(Into::into),
        shots: demos.len(),
        shuffled: false,
    };
    Prompt::from_text(vocab, &text, meta)
}

pub fn build_zero_shot_prompt(vocab: &Vocabulary, template: &PromptTemplate, query: &str) -> Result<Prompt> {
    build_icl_prompt(vocab, template, &[], query, None)
}

/// Uniform random derangement of `0..n` by rejection sampling.
pub fn derangement<R: Rng>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Contract(format!("no derangement of {n} items")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Demonstration outputs are deranged so that no input keeps its own
/// output; inputs keep their order.
pub fn shuffle_demos(demos: &[WordPair], seed: u64) -> Result<Vec<WordPair>> {
    let perm = derangement(demos.len(), &mut seeded(seed, &["derange"]))?;
    Ok(demos
        .iter()
        .zip(&perm)
        .map(|(d, &p)| WordPair::new(d.input.clone(), demos[p].output.clone()))
        .collect())
}

pub fn build_shuffled_prompt(
    vocab: &Vocabulary,
    template: &PromptTemplate,
    demos: &[WordPair],
    query: &str,
    seed: u64,
    relation: Option<&str>,
) -> Result<Prompt> {
    let shuffled = shuffle_demos(demos, seed)?;
    let mut p = build_icl_prompt(vocab, template, &shuffled, query, relation)?;
    p.meta.shuffled = true;
    Ok(p)
}

/// The textual one-shot prompt, the source pair, and the zero-shot target
/// prompt into which a composite vector is injected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnalogyPrompts {
    pub full: Prompt,
    pub source: WordPair,
    pub target: Prompt,
}

pub fn build_analogy_prompt(
    vocab: &Vocabulary,
    template: &PromptTemplate,
    problem: &AnalogyProblem,
) -> Result<AnalogyPrompts> {
    problem.validate()?;
    let full = Prompt::from_text(
        vocab,
        &template.render_analogy(&problem.a, &problem.b, &problem.c),
        PromptMeta {
            shots: 1,
            ..Default::default()
        },
    )?;
    Ok(AnalogyPrompts {
        full,
        source: WordPair::new(problem.a.clone(), problem.b.clone()),
        target: build_zero_shot_prompt(vocab, template, &problem.c)?,
    })
}

/// `x : y ::  :`, read out at the final colon.
pub fn build_blank_pair_prompt(vocab: &Vocabulary, template: &PromptTemplate, pair: &WordPair) -> Result<Prompt> {
    Prompt::from_text(
        vocab,
        &template.render_blank(&pair.input, &pair.output),
        PromptMeta::default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::vocab::COLON;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_words([
            "rich", "poor", "new", "old", "short", "long", "furnace", "coal", "woodstove", "wood", "tall", "blindness",
            "sight", "poverty", "money", "black", "white",
        ])
        .unwrap()
    }

    fn toks(v: &Vocabulary, p: &Prompt) -> String {
        v.detokenize(&p.tokens)
    }

    #[test]
    fn zero_shot_prompt() {
        let v = vocab();
        let p = build_zero_shot_prompt(&v, &PromptTemplate::default(), "rich").unwrap();
        assert_eq!(toks(&v, &p), "Q: rich\nA:");
        assert_eq!(p.answer_position, p.len() - 1);
    }

    #[test]
    fn two_shot_prompt() {
        let v = vocab();
        let demos = [WordPair::new("new", "old"), WordPair::new("short", "long")];
        let p = build_icl_prompt(&v, &PromptTemplate::default(), &demos, "rich", Some("antonym")).unwrap();
        assert_eq!(toks(&v, &p), "Q: new\nA: old\n\nQ: short\nA: long\n\nQ: rich\nA:");
        assert_eq!(p.meta.shots, 2);
        assert_eq!(p.answer_position, p.len() - 1);
    }

    #[test]
    fn unknown_query_is_rejected() {
        let v = vocab();
        assert!(build_zero_shot_prompt(&v, &PromptTemplate::default(), "zebra").is_err());
    }

    #[test]
    fn two_item_derangement_is_the_swap() {
        let demos = [WordPair::new("a", "b"), WordPair::new("c", "d")];
        let s = shuffle_demos(&demos, 3).unwrap();
        assert_eq!(s, vec![WordPair::new("a", "d"), WordPair::new("c", "b")]);
        assert!(shuffle_demos(&demos[..1], 3).is_err());
    }

    #[test]
    fn analogy_prompts() {
        let v = vocab();
        let t = PromptTemplate::default();
        let prob = AnalogyProblem::new("furnace", "coal", "woodstove", "wood", None);
        let ap = build_analogy_prompt(&v, &t, &prob).unwrap();
        assert_eq!(toks(&v, &ap.full), "furnace : coal :: woodstove :");
        assert_eq!(toks(&v, &ap.target), "Q: woodstove\nA:");
        let prob = AnalogyProblem::new("blindness", "sight", "poverty", "money", None);
        let ap = build_analogy_prompt(&v, &t, &prob).unwrap();
        assert_eq!(ap.source, WordPair::new("blindness", "sight"));
    }

    #[test]
    fn blank_pair_prompt_reads_at_final_colon() {
        let v = vocab();
        let t = PromptTemplate::default();
        for (a, b) in [("tall", "short"), ("black", "white")] {
            let p = build_blank_pair_prompt(&v, &t, &WordPair::new(a, b)).unwrap();
            assert_eq!(toks(&v, &p), format!("{a} : {b} ::  :"));
            assert_eq!(v.token(p.tokens[p.answer_position]), COLON);
            let again = build_blank_pair_prompt(&v, &t, &WordPair::new(a, b)).unwrap();
            assert_eq!(again.answer_position, p.answer_position);
        }
    }

    #[test]
    fn derangement_holds_over_many_seeds() {
        let demos: Vec<WordPair> = (0..10)
            .map(|i| WordPair::new(format!("x{i}"), format!("y{i}")))
            .collect();
        for seed in 0..1000 {
            let s = shuffle_demos(&demos, seed).unwrap();
            for (orig, new) in demos.iter().zip(&s) {
                assert_eq!(orig.input, new.input);
                assert_ne!(orig.output, new.output);
            }
        }
    }

    proptest! {
        #[test]
        fn shuffle_preserves_output_multiset(n in 2usize..20, seed in any::<u64>()) {
            let demos: Vec<WordPair> = (0..n).map(|i| WordPair::new(format!("x{i}"), format!("y{}", i % 3))).collect();
            let mut a: Vec<String> = demos.iter().map(|d| d.output.clone()).collect();
            let mut b: Vec<String> = shuffle_demos(&demos, seed).unwrap().into_iter().map(|d| d.output).collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }
    }
}
