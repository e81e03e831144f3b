//! Perturbation-based word importance for trained classifiers.

pub mod lime;
pub mod render;

pub use lime::{explain, explain_words, Explanation, FeatureWeight, LimeConfig, LinearOracle, ModelClassifier, TextClassifier};
pub use render::{render, Format};
