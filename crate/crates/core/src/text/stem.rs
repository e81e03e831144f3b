//! Stopword removal and rule-based suffix stemming. Both resources are data
//! files; the defaults for Bangla ship with the crate.

use std::collections::HashSet;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const DEFAULT_STOPWORDS: &str = include_str!("../../data/bangla_stopwords.txt");
pub const DEFAULT_STEMMER: &str = include_str!("../../data/bangla_stemmer.txt");

fn nfc(s: &str) -> String {
    s.nfc().collect()
}

#[derive(Clone, Debug, Default)]
pub struct StopwordList {
    words: HashSet<String>,
}

impl StopwordList {
    /// One token per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Self {
        let words = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(nfc)
            .collect();
        StopwordList { words }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn bangla() -> Self {
        Self::parse(DEFAULT_STOPWORDS)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuffixRule {
    pub suffix: String,
    pub replacement: String,
    /// Characters that must remain before the replacement is appended.
    pub min_stem_len: usize,
}

/// Ordered suffix rules. The first matching rule fires and the process
/// repeats until no rule matches, so `stem` is idempotent by construction.
/// Every rule must shorten the word, which bounds the iteration.
#[derive(Clone, Debug, Default)]
pub struct Stemmer {
    rules: Vec<SuffixRule>,
}

impl Stemmer {
    pub fn identity() -> Self {
        Stemmer { rules: Vec::new() }
    }

    pub fn new(rules: Vec<SuffixRule>) -> Result<Self> {
        for r in &rules {
            if r.suffix.is_empty() || r.replacement.chars().count() >= r.suffix.chars().count() {
                return Err(Error::Config(format!(
                    "stemmer rule {:?} must replace a non-empty suffix with something shorter",
                    r.suffix
                )));
            }
        }
        Ok(Stemmer { rules })
    }

    /// Parses `suffix⇒replacement,min_stem_len` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Config(format!("stemmer line {}: malformed rule {line:?}", n + 1));
            let (suffix, rest) = line.split_once('⇒').ok_or_else(bad)?;
            let (replacement, min) = rest.rsplit_once(',').ok_or_else(bad)?;
            let min_stem_len = min.trim().parse().map_err(|_| bad())?;
            rules.push(SuffixRule {
                suffix: nfc(suffix.trim()),
                replacement: nfc(replacement.trim()),
                min_stem_len,
            });
        }
        Self::new(rules)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn bangla() -> Self {
        Self::parse(DEFAULT_STEMMER).expect("shipped stemmer rules are valid")
    }

    pub fn rules(&self) -> &[SuffixRule] {
        &self.rules
    }

    fn step(&self, word: &str) -> Option<String> {
        self.rules.iter().find_map(|r| {
            let stem = word.strip_suffix(r.suffix.as_str())?;
            if stem.chars().count() < r.min_stem_len {
                return None;
            }
            Some(format!("{stem}{}", r.replacement))
        })
    }

    pub fn stem(&self, word: &str) -> String {
        let mut cur = word.to_string();
        while let Some(next) = self.step(&cur) {
            cur = next;
        }
        cur
    }
}

/// Drops stopwords, then stems what is left, preserving order.
pub fn remove_stopwords_and_stem(
    tokens: &[String],
    stopwords: &StopwordList,
    stemmer: &Stemmer,
) -> Vec<String> {
    tokens
        .iter()
        .filter(|t| !stopwords.contains(t))
        .map(|t| stemmer.stem(t))
        .filter(|t| !t.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(nfc).collect()
    }

    #[test]
    fn shipped_resources_load() {
        assert!(StopwordList::bangla().len() > 100);
        assert!(Stemmer::bangla().rules().len() >= 15);
    }

    #[test]
    fn all_stopwords_give_empty() {
        let sw = StopwordList::bangla();
        assert!(remove_stopwords_and_stem(&toks("এবং আমি তার"), &sw, &Stemmer::bangla()).is_empty());
    }

    #[test]
    fn identity_case() {
        let t = toks("সরকারের ছেলেগুলোকে x");
        assert_eq!(
            remove_stopwords_and_stem(&t, &StopwordList::default(), &Stemmer::identity()),
            t
        );
    }

    #[test]
    fn stopwords_are_removed_before_stemming() {
        // "তারা" is a stopword; stemming first would turn it into "তা".
        let sw = StopwordList::parse("তারা\n");
        let out = remove_stopwords_and_stem(&toks("তারা দলকে"), &sw, &Stemmer::bangla());
        assert_eq!(out, toks("দল"));
    }

    #[test]
    fn rule_table_fixtures() {
        // Expected stems worked out by hand from the shipped rule file.
        let cases = [
            ("ছেলেগুলোকে", "ছেলে"),
            ("মানুষদের", "মানুষ"),
            ("বইটি", "বই"),
            ("সরকারের", "সরকার"),
            ("খেলোয়াড়রা", "খেলোয়াড়"),
            ("দলকে", "দল"),
            ("শিক্ষার্থীদের", "শিক্ষার্থী"),
            ("বাড়িতে", "বাড়ি"),
            ("বইগুলোর", "বই"),
            ("নির্বাচন", "নির্বাচন"),
            // min_stem_len guard: stripping would leave nothing.
            ("কে", "কে"),
        ];
        let st = Stemmer::bangla();
        for (word, want) in cases {
            assert_eq!(st.stem(&nfc(word)), nfc(want), "{word}");
        }
    }

    #[test]
    fn rules_iterate_to_fixed_point() {
        let st = Stemmer::parse("ab⇒,1\nc⇒,1\n").unwrap();
        assert_eq!(st.stem("xabc"), "x");
    }

    #[test]
    fn rejects_lengthening_rules() {
        assert!(Stemmer::parse("a⇒bb,1").is_err());
        assert!(Stemmer::parse("a⇒b,1").is_err());
        assert!(Stemmer::parse("garbage").is_err());
    }

    proptest! {
        #[test]
        fn stemming_is_idempotent(w in "[\u{0995}-\u{09B9}\u{09BE}-\u{09CC}গুলোকেদেরটিটারা]{1,12}") {
            let st = Stemmer::bangla();
            let w = nfc(&w);
            let once = st.stem(&w);
            prop_assert_eq!(st.stem(&once), once.clone());
        }
    }
}
