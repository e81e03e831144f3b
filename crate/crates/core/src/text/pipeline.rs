//! Raw headline to padded id sequence.

use serde::{Deserialize, Serialize};

use super::clean::{clean, filter_short, words};
use super::stem::{remove_stopwords_and_stem, Stemmer, StopwordList};
use super::tokenizer::{EncodedSequence, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            vocab_size: 2000,
            max_len: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Rejection {
    TooShort,
    EmptyAfterStopwords,
}

#[derive(Clone, Debug, Default)]
pub struct Normalizer {
    pub stopwords: StopwordList,
    pub stemmer: Stemmer,
}

impl Normalizer {
    pub fn bangla() -> Self {
        Normalizer {
            stopwords: StopwordList::bangla(),
            stemmer: Stemmer::bangla(),
        }
    }

    /// Clean, stopword, stem; no length filter. Used at inference time.
    pub fn normalize(&self, raw: &str) -> String {
        let toks = words(&clean(raw));
        remove_stopwords_and_stem(&toks, &self.stopwords, &self.stemmer).join(" ")
    }

    /// The training-time path, which also rejects short headlines.
    pub fn normalize_for_training(&self, raw: &str) -> Result<String, Rejection> {
        let toks = filter_short(words(&clean(raw))).ok_or(Rejection::TooShort)?;
        let kept = remove_stopwords_and_stem(&toks, &self.stopwords, &self.stemmer);
        if kept.is_empty() {
            return Err(Rejection::EmptyAfterStopwords);
        }
        Ok(kept.join(" "))
    }
}

#[derive(Clone, Debug)]
pub struct TextPipeline {
    pub normalizer: Normalizer,
    pub vocab: Vocabulary,
    pub max_len: usize,
}

impl TextPipeline {
    pub fn encode_raw(&self, raw: &str) -> EncodedSequence {
        self.vocab
            .encode_and_pad(&self.normalizer.normalize(raw), self.max_len)
    }

    pub fn encode_normalized(&self, text: &str) -> EncodedSequence {
        self.vocab.encode_and_pad(text, self.max_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_path_rejects() {
        let n = Normalizer::bangla();
        assert_eq!(n.normalize_for_training("খেলা"), Err(Rejection::TooShort));
        assert_eq!(n.normalize_for_training("১২ !!"), Err(Rejection::TooShort));
        assert_eq!(
            n.normalize_for_training("আমি এবং তুমি"),
            Err(Rejection::EmptyAfterStopwords)
        );
        assert_eq!(n.normalize_for_training("দলকে জিতেছে").unwrap(), "দল জিতেছে");
    }

    #[test]
    fn end_to_end_is_deterministic() {
        let n = Normalizer::bangla();
        let corpus = ["সরকারের নতুন সিদ্ধান্ত", "খেলোয়াড়রা মাঠে"];
        let norm: Vec<String> = corpus.iter().map(|t| n.normalize(t)).collect();
        let p = TextPipeline {
            normalizer: n,
            vocab: Vocabulary::train(&norm, 200).unwrap(),
            max_len: 8,
        };
        let a = p.encode_raw("সরকারের নতুন সিদ্ধান্ত ২০২৪!");
        assert_eq!(a, p.encode_raw("সরকারের নতুন সিদ্ধান্ত ২০২৪!"));
        assert_eq!(a.ids.len(), 8);
        assert!(!a.ids.contains(&super::super::tokenizer::UNK));
    }
}
