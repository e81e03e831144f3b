//! JSON, HTML and plain-text renderings of an explanation.

use std::fmt::Write as _;

use super::lime::Explanation;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Html,
    Text,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Format::Json),
            "html" => Ok(Format::Html),
            "text" | "txt" => Ok(Format::Text),
            _ => Err(Error::Config(format!("unknown format {s:?} (json, html, text)"))),
        }
    }
}

pub fn render(e: &Explanation, format: Format) -> Result<String> {
    match format {
        Format::Json => to_json(e),
        Format::Html => Ok(to_html(e)),
        Format::Text => Ok(to_text(e, usize::MAX)),
    }
}

pub fn to_json(e: &Explanation) -> Result<String> {
    Ok(serde_json::to_string_pretty(e)?)
}

pub fn from_json(text: &str) -> Result<Explanation> {
    Ok(serde_json::from_str(text)?)
}

/// Class indices by decreasing probability (ties by index).
pub fn ranked_classes(e: &Explanation) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..e.class_probabilities.len()).collect();
    idx.sort_by(|&a, &b| e.class_probabilities[b].total_cmp(&e.class_probabilities[a]).then(a.cmp(&b)));
    idx
}

fn label(e: &Explanation, c: usize) -> String {
    e.class_labels.get(c).cloned().unwrap_or_else(|| c.to_string())
}

/// Probabilities and the `top` strongest words as an aligned table.
pub fn to_text(e: &Explanation, top: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "text: {}", e.text);
    let _ = writeln!(out, "explained class: {} (surrogate R² {:.4})", label(e, e.target_class), e.surrogate_fit);
    for c in ranked_classes(e) {
        let _ = writeln!(out, "  {:<12} {:.4}", label(e, c), e.class_probabilities[c]);
    }
    if !e.feature_weights.is_empty() {
        let _ = writeln!(out, "word weights:");
        for f in e.feature_weights.iter().take(top) {
            let _ = writeln!(out, "  {:<16} {:+.4}", f.word, f.weight);
        }
    }
    out
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// Probability bars on the left, the headline with words tinted by weight
/// (green supports the explained class, red opposes it) on the right.
pub fn to_html(e: &Explanation) -> String {
    let max_w = e.feature_weights.iter().map(|f| f.weight.abs()).fold(0.0, f64::max);
    let mut html = String::new();
    html.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Explanation</title>\n<style>\n");
    html.push_str("body{font-family:sans-serif;display:flex;gap:3em}\n.bar{height:1.1em;background:#f0a030}\n");
    html.push_str(".row{display:flex;gap:.5em;align-items:center;margin:.2em 0}\n.lab{width:7em}\n.w{padding:0 .15em}\n");
    html.push_str("</style></head><body>\n<div class=\"probs\"><h3>Prediction probabilities</h3>\n");
    for c in ranked_classes(e) {
        let p = e.class_probabilities[c];
        let _ = writeln!(
            html,
            "<div class=\"row\"><span class=\"lab\">{}</span><div class=\"bar\" style=\"width:{:.1}px\"></div><span>{:.2}</span></div>",
            escape(&label(e, c)),
            200.0 * p,
            p
        );
    }
    html.push_str("</div>\n");
    if !e.feature_weights.is_empty() {
        let _ = writeln!(html, "<div class=\"words\"><h3>{}</h3>\n<table>", escape(&label(e, e.target_class)));
        for f in &e.feature_weights {
            let _ = writeln!(html, "<tr><td>{}</td><td>{:+.4}</td></tr>", escape(&f.word), f.weight);
        }
        html.push_str("</table>\n<p>");
        for word in e.text.split_whitespace() {
            let w = e.weight_of(word).unwrap_or(0.0);
            let alpha = if max_w > 0.0 { w.abs() / max_w } else { 0.0 };
            let rgb = if w >= 0.0 { "40,160,60" } else { "210,50,50" };
            let _ = write!(
                html,
                "<span class=\"w\" style=\"background:rgba({rgb},{alpha:.3})\">{}</span> ",
                escape(word)
            );
        }
        html.push_str("</p></div>\n");
    }
    let _ = writeln!(
        html,
        "<footer hidden>samples={} kernel_width={} ridge={} seed={} r2={}</footer>",
        e.num_samples, e.kernel_width, e.ridge, e.seed, e.surrogate_fit
    );
    html.push_str("</body></html>\n");
    html
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::lime::FeatureWeight;

    fn fig3_like() -> Explanation {
        Explanation {
            text: "সংসদ নির্বাচন <ঢাকা>".into(),
            class_labels: vec!["other".into(), "politics".into(), "religion".into(), "sports".into()],
            target_class: 1,
            class_probabilities: vec![0.32, 0.53, 0.05, 0.10],
            feature_weights: vec![
                FeatureWeight { word: "নির্বাচন".into(), weight: 0.21 },
                FeatureWeight { word: "<ঢাকা>".into(), weight: -0.04 },
            ],
            intercept: 0.3,
            surrogate_fit: 0.93,
            local_prediction: 0.51,
            max_residual: 0.05,
            num_samples: 1000,
            kernel_width: 1.3,
            ridge: 1e-3,
            seed: 7,
        }
    }

    #[test]
    fn json_roundtrips() {
        let e = fig3_like();
        assert_eq!(from_json(&to_json(&e).unwrap()).unwrap(), e);
    }

    #[test]
    fn probability_bars_are_ordered() {
        let e = fig3_like();
        assert_eq!(ranked_classes(&e), vec![1, 0, 3, 2]);
        let html = to_html(&e);
        let p = html.find(">politics<").unwrap();
        let o = html.find(">other<").unwrap();
        assert!(p < o);
        assert!(html.contains("&lt;ঢাকা&gt;"));
        assert!(!html.contains("<ঢাকা>"));
        let text = to_text(&e, 1);
        assert!(text.contains("politics") && text.contains("+0.2100") && !text.contains("-0.0400"));
    }

    #[test]
    fn empty_feature_list_renders() {
        let e = Explanation { feature_weights: vec![], ..fig3_like() };
        for f in [Format::Json, Format::Html, Format::Text] {
            assert!(!render(&e, f).unwrap().is_empty());
        }
        assert!(!to_html(&e).contains("<table>"));
    }

    #[test]
    fn unknown_format() {
        assert!("pdf".parse::<Format>().is_err());
        assert_eq!("HTML".parse::<Format>().unwrap(), Format::Html);
    }
}
