//! Relation, analogy and similarity-matrix datasets, the word-level
//! vocabulary, and the synthetic relation world used for pretraining.

pub mod analogy;
pub mod relation;
pub mod similarity;
pub mod synthetic;
pub mod vocab;

pub use analogy::{load_analogy_file, AnalogyProblem};
pub use relation::{
    load_relation_file, save_relation_file, split_relation, Family, RelationDataset, RelationSplits, SplitSpec,
    WordPair,
};
pub use similarity::{load_human_similarity_matrix, HumanSimilarityMatrix};
pub use synthetic::{generate_synthetic_relations, SyntheticBundle, SyntheticSpec, TrainingSequence};
pub use vocab::Vocabulary;
