//! Headline preprocessing: cleaning, stopwords, stemming, subword encoding.

pub mod clean;
pub mod pipeline;
pub mod stem;
pub mod tokenizer;

pub use clean::{clean, filter_short};
pub use pipeline::{Normalizer, Rejection, TextConfig, TextPipeline};
pub use stem::{remove_stopwords_and_stem, Stemmer, StopwordList, SuffixRule};
pub use tokenizer::{EncodedSequence, Vocabulary, CLS, PAD, SEP, UNK};
