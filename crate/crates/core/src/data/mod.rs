//! Corpus handling: ingestion, class balancing and evaluation splits.

pub mod dataset;
pub mod resample;
pub mod split;
pub mod synthetic;

pub use dataset::{load_csv, read_csv, write_csv, ClassCounts, CsvSchema, Dataset, Example, Task};
pub use resample::{oversample, undersample, Resampler};
pub use split::{
    fold_test_overlap, kfold, run_technique, stratified_split, technique1, technique2, Fold,
    Provenance, Ratios, Split, SplitAudit, Technique,
};
