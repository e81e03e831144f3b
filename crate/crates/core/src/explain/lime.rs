//! Local surrogate explanations over word-presence features.
//!
//! Each distinct word of the instance is one binary feature. Perturbations
//! drop words (every occurrence) before subword encoding, the classifier
//! scores each variant, and a proximity-weighted ridge regression of the
//! target-class probability on the masks gives the word weights.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, HybridModel};
use crate::rng::Rng;
use crate::text::{EncodedSequence, Normalizer, Vocabulary, CLS, PAD, SEP};

/// Anything that maps normalised texts to class probabilities.
pub trait TextClassifier {
    fn class_labels(&self) -> Vec<String>;

    /// One probability row per text.
    fn predict_proba(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LimeConfig {
    /// Perturbed samples including the unperturbed instance.
    pub num_samples: usize,
    /// Defaults to 0.75·√(feature count).
    pub kernel_width: Option<f64>,
    pub ridge: f64,
    pub batch_size: usize,
}

impl Default for LimeConfig {
    fn default() -> Self {
        LimeConfig { num_samples: 1000, kernel_width: None, ridge: 1e-3, batch_size: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeight {
    pub word: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    /// The normalised instance text.
    pub text: String,
    pub class_labels: Vec<String>,
    pub target_class: usize,
    pub class_probabilities: Vec<f64>,
    /// Sorted by decreasing magnitude.
    pub feature_weights: Vec<FeatureWeight>,
    pub intercept: f64,
    /// Weighted R² of the surrogate on the samples.
    pub surrogate_fit: f64,
    /// Surrogate value at the unperturbed instance.
    pub local_prediction: f64,
    /// Largest absolute surrogate residual over the samples.
    pub max_residual: f64,
    pub num_samples: usize,
    pub kernel_width: f64,
    pub ridge: f64,
    pub seed: u64,
}

impl Explanation {
    pub fn weight_of(&self, word: &str) -> Option<f64> {
        self.feature_weights.iter().find(|f| f.word == word).map(|f| f.weight)
    }
}

/// `exp(-d² / w²)`.
pub fn kernel(distance: f64, width: f64) -> f64 {
    (-(distance * distance) / (width * width)).exp()
}

/// Cosine distance of a mask to the all-ones mask; 1 for the empty mask.
pub fn cosine_distance_to_ones(mask: &[bool]) -> f64 {
    let on = mask.iter().filter(|&&m| m).count();
    if on == 0 {
        1.0
    } else {
        1.0 - (on as f64 / mask.len() as f64).sqrt()
    }
}

/// Distinct words in first-occurrence order.
pub fn features(words: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for w in words {
        if !out.contains(w) {
            out.push(w.clone());
        }
    }
    out
}

/// The instance with every word whose feature is off removed.
pub fn perturb(words: &[String], feats: &[String], mask: &[bool]) -> String {
    words
        .iter()
        .filter(|w| feats.iter().position(|f| f == *w).is_none_or(|i| mask[i]))
        .map(String::as_str)
        .collect::<Vec<_>>()
        .join(" ")
}

/// The all-ones mask first, then masks that switch off a uniformly drawn
/// number (1..=d) of uniformly chosen features.
pub fn sample_masks(d: usize, n: usize, rng: &mut Rng) -> Vec<Vec<bool>> {
    let mut masks = vec![vec![true; d]];
    while masks.len() < n {
        let off = 1 + rng.below(d);
        let mut m = vec![true; d];
        for i in rng.sample_indices(d, off) {
            m[i] = false;
        }
        masks.push(m);
    }
    masks
}

pub struct RidgeFit {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub r2: f64,
    pub max_residual: f64,
}

/// Weighted ridge regression with an unpenalised intercept.
pub fn weighted_ridge(x: &[Vec<f64>], y: &[f64], w: &[f64], lambda: f64) -> Result<RidgeFit> {
    let n = x.len();
    let d = x.first().map_or(0, Vec::len);
    let wsum: f64 = w.iter().sum();
    if n == 0 || !(wsum > 0.0) {
        return Err(Error::Explain("no weighted samples".into()));
    }
    let xbar: Vec<f64> = (0..d).map(|j| (0..n).map(|i| w[i] * x[i][j]).sum::<f64>() / wsum).collect();
    let ybar = (0..n).map(|i| w[i] * y[i]).sum::<f64>() / wsum;
    let xc = DMatrix::from_fn(n, d, |i, j| x[i][j] - xbar[j]);
    let wx = DMatrix::from_fn(n, d, |i, j| w[i] * xc[(i, j)]);
    let yc = DVector::from_fn(n, |i, _| y[i] - ybar);
    let a = xc.transpose() * &wx + DMatrix::identity(d, d) * lambda;
    let b = wx.transpose() * &yc;
    let coef = a
        .clone()
        .cholesky()
        .map(|c| c.solve(&b))
        .or_else(|| a.lu().solve(&b))
        .ok_or_else(|| Error::Explain("singular surrogate system".into()))?;
    let coef: Vec<f64> = coef.iter().copied().collect();
    let intercept = ybar - coef.iter().zip(&xbar).map(|(c, m)| c * m).sum::<f64>();

    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    let mut max_residual: f64 = 0.0;
    for i in 0..n {
        let pred = intercept + coef.iter().zip(&x[i]).map(|(c, v)| c * v).sum::<f64>();
        let r = y[i] - pred;
        ss_res += w[i] * r * r;
        ss_tot += w[i] * (y[i] - ybar).powi(2);
        max_residual = max_residual.max(r.abs());
    }
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else if ss_res <= 1e-24 { 1.0 } else { 0.0 };
    Ok(RidgeFit { intercept, coef, r2, max_residual })
}

/// Explains an already-normalised word sequence. `class` defaults to the
/// predicted class.
pub fn explain_words(
    words: &[String],
    classifier: &dyn TextClassifier,
    class: Option<usize>,
    cfg: &LimeConfig,
    seed: u64,
) -> Result<Explanation> {
    let labels = classifier.class_labels();
    let text = words.join(" ");
    let probs = classifier.predict_proba(std::slice::from_ref(&text))?.remove(0);
    let predicted = (0..probs.len()).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
    let target = class.unwrap_or(predicted);
    if target >= probs.len() {
        return Err(Error::Index { what: "class", index: target, len: probs.len() });
    }
    let feats = features(words);
    let d = feats.len();
    let width = cfg.kernel_width.unwrap_or(0.75 * (d as f64).sqrt());
    let base = Explanation {
        text,
        class_labels: labels,
        target_class: target,
        class_probabilities: probs.clone(),
        feature_weights: Vec::new(),
        intercept: probs[target],
        surrogate_fit: 1.0,
        local_prediction: probs[target],
        max_residual: 0.0,
        num_samples: 0,
        kernel_width: width,
        ridge: cfg.ridge,
        seed,
    };
    if d == 0 {
        return Ok(base);
    }
    if cfg.num_samples < d + 2 {
        return Err(Error::Explain(format!(
            "{} samples cannot determine {d} feature weights (need at least {})",
            cfg.num_samples,
            d + 2
        )));
    }
    if !(width > 0.0) {
        return Err(Error::Explain("kernel width must be positive".into()));
    }

    let masks = sample_masks(d, cfg.num_samples, &mut Rng::new(seed));
    let variants: Vec<String> = masks.iter().map(|m| perturb(words, &feats, m)).collect();
    let mut y = Vec::with_capacity(variants.len());
    for chunk in variants.chunks(cfg.batch_size.max(1)) {
        y.extend(classifier.predict_proba(chunk)?.into_iter().map(|p| p[target]));
    }
    let x: Vec<Vec<f64>> = masks.iter().map(|m| m.iter().map(|&b| f64::from(u8::from(b))).collect()).collect();
    let w: Vec<f64> = masks.iter().map(|m| kernel(cosine_distance_to_ones(m), width)).collect();
    let fit = weighted_ridge(&x, &y, &w, cfg.ridge)?;
    if fit.coef.iter().any(|c| !c.is_finite()) {
        return Err(Error::Explain("non-finite surrogate weights".into()));
    }

    let mut feature_weights: Vec<FeatureWeight> = feats
        .into_iter()
        .zip(&fit.coef)
        .map(|(word, &weight)| FeatureWeight { word, weight })
        .collect();
    feature_weights.sort_by(|a, b| b.weight.abs().total_cmp(&a.weight.abs()));
    Ok(Explanation {
        feature_weights,
        intercept: fit.intercept,
        surrogate_fit: fit.r2,
        local_prediction: fit.intercept + fit.coef.iter().sum::<f64>(),
        max_residual: fit.max_residual,
        num_samples: masks.len(),
        ..base
    })
}

/// Normalises `raw` through the training-time path (so rejected headlines
/// are an error) and explains the result.
pub fn explain(
    raw: &str,
    normalizer: &Normalizer,
    classifier: &dyn TextClassifier,
    class: Option<usize>,
    cfg: &LimeConfig,
    seed: u64,
) -> Result<Explanation> {
    let text = normalizer
        .normalize_for_training(raw)
        .map_err(|r| Error::Explain(format!("text rejected by preprocessing: {r:?}")))?;
    let words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    explain_words(&words, classifier, class, cfg, seed)
}

/// `p(positive) = σ(bias + Σ weight·present(word))` over two classes.
#[derive(Clone, Debug)]
pub struct LinearOracle {
    pub weights: Vec<(String, f64)>,
    pub bias: f64,
}

impl TextClassifier for LinearOracle {
    fn class_labels(&self) -> Vec<String> {
        vec!["negative".into(), "positive".into()]
    }

    fn predict_proba(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts
            .iter()
            .map(|t| {
                let present: Vec<&str> = t.split_whitespace().collect();
                let z = self.bias
                    + self.weights.iter().filter(|(w, _)| present.contains(&w.as_str())).map(|(_, v)| v).sum::<f64>();
                let p = 1.0 / (1.0 + (-z).exp());
                vec![1.0 - p, p]
            })
            .collect())
    }
}

/// Adapter scoring normalised text with a trained model.
pub struct ModelClassifier<'a> {
    pub model: &'a HybridModel,
    pub vocab: &'a Vocabulary,
    pub labels: Vec<String>,
    pub batch_size: usize,
}

impl ModelClassifier<'_> {
    fn encode(&self, text: &str) -> EncodedSequence {
        let max_len = self.model.config.max_len;
        let mut s = self.vocab.encode_and_pad(text, max_len);
        if s.mask.iter().all(|&m| m == 0) {
            // A fully ablated headline still needs one attendable position.
            s.ids = vec![PAD; max_len];
            s.ids[0] = CLS;
            s.ids[1.min(max_len - 1)] = SEP;
            s.mask = s.ids.iter().map(|&t| u8::from(t != PAD)).collect();
        }
        s
    }
}

impl TextClassifier for ModelClassifier<'_> {
    fn class_labels(&self) -> Vec<String> {
        self.labels.clone()
    }

    fn predict_proba(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size.max(1)) {
            let seqs: Vec<EncodedSequence> = chunk.iter().map(|t| self.encode(t)).collect();
            let refs: Vec<&EncodedSequence> = seqs.iter().collect();
            let probs = self.model.predict_proba(&Batch::from_sequences(&refs, &[])?)?;
            let c = probs.last_dim();
            out.extend(probs.data().chunks(c).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn oracle() -> LinearOracle {
        LinearOracle { weights: vec![("ক".into(), 3.0), ("খ".into(), -2.0)], bias: 0.0 }
    }

    #[test]
    fn kernel_at_zero_distance_is_one() {
        assert_eq!(kernel(0.0, 0.75), 1.0);
        assert_eq!(cosine_distance_to_ones(&[true, true, true]), 0.0);
        assert_eq!(cosine_distance_to_ones(&[false, false]), 1.0);
    }

    #[test]
    fn perturbation_removes_every_occurrence() {
        let w = words("ক খ ক গ");
        let f = features(&w);
        assert_eq!(f, words("ক খ গ"));
        assert_eq!(perturb(&w, &f, &[false, true, true]), "খ গ");
        assert_eq!(perturb(&w, &f, &[true, true, true]), "ক খ ক গ");
    }

    #[test]
    fn recovers_linear_oracle() {
        let w = words("ক খ গ ঘ ঙ চ");
        let e = explain_words(&w, &oracle(), Some(1), &LimeConfig::default(), 3).unwrap();
        let (a, b) = (e.weight_of("ক").unwrap(), e.weight_of("খ").unwrap());
        assert!(a > 0.0 && b < 0.0 && a.abs() > b.abs());
        assert_eq!(e.feature_weights[0].word, "ক");
        assert!(e.surrogate_fit >= 0.9, "R² {}", e.surrogate_fit);
        assert!((e.local_prediction - e.class_probabilities[1]).abs() <= e.max_residual + 1e-12);
    }

    #[test]
    fn unperturbed_instance_matches_prediction_and_is_deterministic() {
        let w = words("ক গ ঘ");
        let o = oracle();
        let e1 = explain_words(&w, &o, None, &LimeConfig { num_samples: 50, ..LimeConfig::default() }, 9).unwrap();
        let direct = o.predict_proba(&[w.join(" ")]).unwrap().remove(0);
        assert_eq!(e1.class_probabilities, direct);
        assert_eq!(e1.target_class, 1);
        let e2 = explain_words(&w, &o, None, &LimeConfig { num_samples: 50, ..LimeConfig::default() }, 9).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn underdetermined_and_empty() {
        let w = words("ক খ গ");
        let cfg = LimeConfig { num_samples: 4, ..LimeConfig::default() };
        assert!(matches!(explain_words(&w, &oracle(), None, &cfg, 1), Err(Error::Explain(_))));
        let e = explain_words(&[], &oracle(), None, &LimeConfig::default(), 1).unwrap();
        assert!(e.feature_weights.is_empty());
        assert!((e.class_probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejected_text_is_an_error() {
        let r = explain("খেলা", &Normalizer::bangla(), &oracle(), None, &LimeConfig::default(), 1);
        assert!(matches!(r, Err(Error::Explain(_))));
    }

    #[test]
    fn ridge_recovers_exact_plane() {
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]).collect();
        let y: Vec<f64> = x.iter().map(|r| 0.5 + 2.0 * r[0] - r[1] + 0.25 * r[2]).collect();
        let fit = weighted_ridge(&x, &y, &[1.0; 8], 0.0).unwrap();
        for (c, want) in fit.coef.iter().zip([2.0, -1.0, 0.25]) {
            assert!((c - want).abs() < 1e-12);
        }
        assert!((fit.intercept - 0.5).abs() < 1e-12);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masking_an_absent_word_changes_nothing() {
        let w = words("ক গ");
        let feats = words("ক গ খ");
        let o = oracle();
        for m in [[true, true], [true, false], [false, true], [false, false]] {
            let on = perturb(&w, &feats, &[m[0], m[1], true]);
            let off = perturb(&w, &feats, &[m[0], m[1], false]);
            assert_eq!(o.predict_proba(&[on]).unwrap(), o.predict_proba(&[off]).unwrap());
        }
    }

    #[test]
    fn model_adapter_scores_empty_variants() {
        use crate::model::ModelConfig;
        let vocab = Vocabulary::train(&["ক খ গ", "খ গ ঘ"], 30).unwrap();
        let mut c = ModelConfig::tiny(vocab.len(), 6, 8);
        c.kernel_sizes = vec![2];
        c.filters = 3;
        c.proj_dim = 4;
        c.hidden = 3;
        c.attn_dim = 3;
        c.dense_units = 4;
        let model = HybridModel::new(c, 2).unwrap();
        let labels = crate::data::Task::Aspect.labels().iter().map(|s| s.to_string()).collect();
        let clf = ModelClassifier { model: &model, vocab: &vocab, labels, batch_size: 4 };
        let p = clf.predict_proba(&["ক খ".into(), String::new()]).unwrap();
        assert_eq!(p.len(), 2);
        for row in &p {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let e = explain_words(&words("ক খ গ"), &clf, None, &LimeConfig { num_samples: 40, ..LimeConfig::default() }, 5).unwrap();
        assert_eq!(e.feature_weights.len(), 3);
        assert!(e.feature_weights.iter().all(|f| f.weight.is_finite()));
    }
}
