//! Synthetic accented speech corpora and feature-level augmentation.

mod augment;
mod corpus;

pub use augment::{spec_augment, speed_perturb, SpecAugmentPolicy};
pub use corpus::{
    condition_number, generate_corpus, Coloring, FeatureMatrix, Inventory, Split, SyntheticCorpusSpec, Utterance,
    ACCENT_NAMES,
};
