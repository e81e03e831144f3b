//! WordPiece-style subword vocabulary: trained by greedy pair merges over
//! word-internal symbols, applied by greedy longest-match.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const CONTINUATION: &str = "##";
const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];
const MAX_WORD_CHARS: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reserved {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct VocabFile {
    pieces: Vec<String>,
    reserved: Reserved,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    /// Token count including CLS and SEP, before truncation or padding.
    pub original_length: usize,
}

fn symbols(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| {
            if i == 0 {
                c.to_string()
            } else {
                format!("{CONTINUATION}{c}")
            }
        })
        .collect()
}

fn join(a: &str, b: &str) -> String {
    format!("{a}{}", b.strip_prefix(CONTINUATION).unwrap_or(b))
}

impl Vocabulary {
    fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if index.insert(p.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary piece {p:?}")));
            }
        }
        Ok(Vocabulary { pieces, index })
    }

    /// Learns a vocabulary of at most `vocab_size` pieces (reserved included).
    /// Deterministic: the most frequent adjacent pair is merged each round,
    /// ties broken by lexicographic order of the pair.
    pub fn train<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Self> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for text in corpus {
            for w in text.as_ref().split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Data("cannot train a tokenizer on an empty corpus".into()));
        }
        let mut words: Vec<(Vec<String>, usize)> =
            counts.iter().map(|(w, &c)| (symbols(w), c)).collect();
        let base: BTreeSet<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
        let floor = RESERVED.len() + base.len();
        if vocab_size < floor {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} is below the {floor} reserved and base symbols"
            )));
        }
        let mut pieces: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        pieces.extend(base);
        let mut known: BTreeSet<String> = pieces.iter().cloned().collect();

        while pieces.len() < vocab_size {
            let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (syms, c) in &words {
                for w in syms.windows(2) {
                    *pairs.entry((&w[0], &w[1])).or_default() += c;
                }
            }
            // BTreeMap iterates in lexicographic order; keep the first maximum.
            let Some(((a, b), _)) = pairs
                .iter()
                .fold(None, |best: Option<(&(&str, &str), usize)>, (k, &c)| match best {
                    Some((_, bc)) if bc >= c => best,
                    _ => Some((k, c)),
                })
            else {
                break;
            };
            let (a, b) = (a.to_string(), b.to_string());
            let merged = join(&a, &b);
            for (syms, _) in &mut words {
                let mut out = Vec::with_capacity(syms.len());
                let mut i = 0;
                while i < syms.len() {
                    if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                        out.push(merged.clone());
                        i += 2;
                    } else {
                        out.push(std::mem::take(&mut syms[i]));
                        i += 1;
                    }
                }
                *syms = out;
            }
            if known.insert(merged.clone()) {
                pieces.push(merged);
            }
        }
        Self::from_pieces(pieces)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    /// Greedy longest-match pieces of one word; a word with an unmatched
    /// span maps to a single UNK.
    pub fn tokenize_word(&self, word: &str) -> Vec<u32> {
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() {
            return Vec::new();
        }
        if chars.len() > MAX_WORD_CHARS {
            return vec![UNK];
        }
        let mut out = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                let body: String = chars[start..end].iter().collect();
                let cand = if start == 0 {
                    body
                } else {
                    format!("{CONTINUATION}{body}")
                };
                if let Some(id) = self.id(&cand) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    out.push(id);
                    start = end;
                }
                None => return vec![UNK],
            }
        }
        out
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .flat_map(|w| self.tokenize_word(w))
            .collect()
    }

    /// `[CLS] pieces [SEP]`, truncated to `t_max` and post-padded with PAD.
    /// Text with no pieces yields an all-PAD row.
    pub fn encode_and_pad(&self, text: &str, t_max: usize) -> EncodedSequence {
        let body = self.tokenize(text);
        let mut ids = Vec::with_capacity(t_max.max(body.len() + 2));
        if !body.is_empty() {
            ids.push(CLS);
            ids.extend(body);
            ids.push(SEP);
        }
        let original_length = ids.len();
        ids.truncate(t_max);
        let real = ids.len();
        ids.resize(t_max, PAD);
        let mask = (0..t_max).map(|i| u8::from(i < real)).collect();
        EncodedSequence {
            ids,
            mask,
            original_length,
        }
    }

    /// Inverse of tokenization up to whitespace; reserved ids are skipped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id < RESERVED.len() as u32 && id != UNK {
                continue;
            }
            let piece = self.piece(id).unwrap_or("[UNK]");
            match piece.strip_prefix(CONTINUATION) {
                Some(rest) if !out.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(piece);
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            pieces: self.pieces.clone(),
            reserved: Reserved {
                pad: PAD,
                unk: UNK,
                cls: CLS,
                sep: SEP,
            },
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        let want = Reserved {
            pad: PAD,
            unk: UNK,
            cls: CLS,
            sep: SEP,
        };
        if file.reserved != want {
            return Err(Error::Config(format!(
                "unsupported reserved ids {:?}",
                file.reserved
            )));
        }
        if file.pieces.len() < RESERVED.len()
            || file.pieces[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b)
        {
            return Err(Error::Config("vocabulary must start with the reserved pieces".into()));
        }
        Self::from_pieces(file.pieces)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn repeated_word_becomes_one_piece() {
        let v = Vocabulary::train(&["hello hello hello"], 50).unwrap();
        let id = v.id("hello").expect("merged to a single piece");
        assert_eq!(v.tokenize("hello"), vec![id]);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["খেলা দেখা খেলা", "দেখা শেখা", "abc abd"];
        let a = Vocabulary::train(&corpus, 40).unwrap();
        let b = Vocabulary::train(&corpus, 40).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tie_break_is_lexicographic() {
        // Pairs (a,##b) and (c,##d) both occur once; (a,##b) sorts first.
        let v = Vocabulary::train(&["ab cd"], 4 + 4 + 1).unwrap();
        assert_eq!(v.pieces().last().unwrap(), "ab");
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(Vocabulary::train::<&str>(&[], 10).is_err());
        assert!(Vocabulary::train(&["   "], 10).is_err());
        assert!(Vocabulary::train(&["abc"], 3).is_err());
    }

    #[test]
    fn padding_and_mask() {
        let v = Vocabulary::train(&["a b c"], 20).unwrap();
        let e = v.encode_and_pad("a", 5);
        let a = v.id("a").unwrap();
        assert_eq!(e.ids, vec![CLS, a, SEP, PAD, PAD]);
        assert_eq!(e.mask, vec![1, 1, 1, 0, 0]);
        assert_eq!(e.original_length, 3);
    }

    #[test]
    fn truncation_keeps_prefix() {
        let v = Vocabulary::train(&["a b"], 20).unwrap();
        let text = vec!["a"; 400].join(" ");
        let e = v.encode_and_pad(&text, 300);
        assert_eq!(e.ids.len(), 300);
        assert_eq!(e.original_length, 402);
        assert!(e.mask.iter().all(|&m| m == 1));
        assert_eq!(e.ids[0], CLS);
        assert!(e.ids[1..].iter().all(|&i| i == v.id("a").unwrap()));
    }

    #[test]
    fn empty_text_is_all_pad() {
        let v = Vocabulary::train(&["a b"], 20).unwrap();
        let e = v.encode_and_pad("", 4);
        assert_eq!(e.ids, vec![PAD; 4]);
        assert_eq!(e.mask, vec![0; 4]);
    }

    #[test]
    fn unknown_character_gives_unk() {
        let v = Vocabulary::train(&["ab"], 20).unwrap();
        assert_eq!(v.tokenize("ax b"), vec![UNK, v.id("b").unwrap_or(UNK)]);
    }

    #[test]
    fn json_roundtrip() {
        let v = Vocabulary::train(&["বাংলা খবর", "খবর"], 30).unwrap();
        let back = Vocabulary::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(v, back);
        assert!(Vocabulary::from_json(r#"{"pieces":["x"],"reserved":{"pad":0,"unk":1,"cls":2,"sep":3}}"#).is_err());
    }

    proptest! {
        #[test]
        fn training_corpus_has_no_unk_and_roundtrips(
            words in prop::collection::vec("[a-e\u{0995}-\u{099A}]{1,6}", 1..20),
            extra in 0usize..60,
        ) {
            let text = words.join(" ");
            let base: BTreeSet<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
            // Upper bound on base symbols: each char as head and as continuation.
            let v = Vocabulary::train(&[text.as_str()], 4 + 2 * base.len() + extra).unwrap();
            let ids = v.tokenize(&text);
            prop_assert!(!ids.contains(&UNK));
            prop_assert_eq!(v.decode(&ids), text.clone());
            let e = v.encode_and_pad(&text, 16);
            prop_assert_eq!(e.ids.len(), 16);
            for (id, m) in e.ids.iter().zip(&e.mask) {
                if *m == 0 { prop_assert_eq!(*id, PAD); }
            }
        }
    }
}
