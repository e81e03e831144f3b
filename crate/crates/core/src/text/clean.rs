//! Surface cleaning of raw headlines.

use std::sync::OnceLock;

use regex::Regex;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

const ZWNJ: char = '\u{200C}';
const ZWJ: char = '\u{200D}';

fn markup() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(concat!(
            r"<[^<>]*>",                       // html tags
            r"|&(?:#[0-9]+|#[xX][0-9a-fA-F]+|[a-zA-Z]+);", // entities
            r"|(?:https?|ftp)://\S*",          // urls
            r"|www\.\S*",
            r"|\S+@\S+",                       // emails
            r"|[@#]\S+",                       // mentions, hashtags
        ))
        .expect("static regex")
    })
}

fn is_bangla_digit(c: char) -> bool {
    ('\u{09E6}'..='\u{09EF}').contains(&c)
}

fn keep(c: char) -> bool {
    if c.is_ascii_digit() || is_bangla_digit(c) {
        return false;
    }
    c.is_alphabetic() || is_combining_mark(c) || c == ZWJ || c == ZWNJ
}

/// Removes markup, digits and symbols; NFC-normalizes and collapses whitespace.
pub fn clean(raw: &str) -> String {
    let nfc: String = raw.nfc().collect();
    let stripped = markup().replace_all(&nfc, " ");
    let filtered: String = stripped
        .chars()
        .map(|c| if keep(c) { c } else { ' ' })
        .collect::<String>()
        .to_lowercase();
    let collapsed = filtered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed.nfc().collect()
}

/// `None` when fewer than two words remain.
pub fn filter_short(words: Vec<String>) -> Option<Vec<String>> {
    if words.len() < 2 {
        None
    } else {
        Some(words)
    }
}

pub fn words(cleaned: &str) -> Vec<String> {
    cleaned.split_whitespace().map(str::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn strips_digits_and_symbols() {
        assert_eq!(clean("abc123!!"), "abc");
        assert_eq!(clean("১২৩ 456 !!! ৳"), "");
        assert_eq!(clean(""), "");
    }

    #[test]
    fn removes_markup() {
        assert_eq!(
            clean("<b>খেলা</b> দেখুন https://x.com/a?b=1 &amp; mail@x.org #tag"),
            "খেলা দেখুন"
        );
    }

    #[test]
    fn danda_and_punctuation_become_spaces() {
        assert_eq!(clean("সরকার।নতুন,সিদ্ধান্ত"), "সরকার নতুন সিদ্ধান্ত");
    }

    #[test]
    fn keeps_vowel_signs_and_joiners() {
        let s = "ক্\u{200D}ষ বাংলাদেশ";
        assert_eq!(clean(s), s);
    }

    #[test]
    fn normalizes_to_nfc() {
        // U+09DF (precomposed YYA) is a composition exclusion, so NFC yields the pair.
        assert_eq!(clean("\u{09DF}"), "\u{09AF}\u{09BC}");
        assert_eq!(clean("e\u{0301}"), "\u{00E9}");
    }

    #[test]
    fn filter_short_boundary() {
        assert!(filter_short(vec![]).is_none());
        assert!(filter_short(vec!["এক".into()]).is_none());
        assert_eq!(filter_short(vec!["a".into(), "b".into()]).unwrap().len(), 2);
    }

    proptest! {
        #[test]
        fn clean_is_idempotent(s in "\\PC{0,40}") {
            let once = clean(&s);
            prop_assert_eq!(clean(&once), once.clone());
        }

        #[test]
        fn clean_is_idempotent_on_bangla(s in "[\u{0980}-\u{09FF} <>&#@:/.a-z0-9]{0,40}") {
            let once = clean(&s);
            prop_assert_eq!(clean(&once), once.clone());
            prop_assert!(!once.chars().any(|c| c.is_ascii_digit() || is_bangla_digit(c)));
        }
    }
}
