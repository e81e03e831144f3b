//! Confusion matrices and weighted precision / recall / F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_labels(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::shape("confusion matrix", &[truth.len()], &[predicted.len()]));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Data("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix { classes: c, counts: rows.concat() })
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        for v in [truth, predicted] {
            if v >= self.classes {
                return Err(Error::Index { what: "class", index: v, len: self.classes });
            }
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Support of class `c`.
    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|j| self.get(c, j)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, c)).sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    /// CSV with a header of predicted labels and one row per true label.
    pub fn to_csv(&self, labels: &[&str]) -> String {
        let mut out = String::from("true\\pred");
        for l in labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (i, row) in self.rows().iter().enumerate() {
            out.push_str(labels.get(i).copied().unwrap_or("?"));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when the metric's denominator was zero and it was reported as 0.
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub total: u64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Support-weighted averages.
    pub weighted: Averages,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn has_undefined(&self) -> bool {
        self.per_class
            .iter()
            .any(|c| c.precision_undefined || c.recall_undefined || c.f1_undefined)
    }
}

/// `num / den`, or 0 with the flag set when `den` is 0.
pub fn safe_ratio(num: f64, den: f64) -> (f64, bool) {
    if den == 0.0 {
        (0.0, true)
    } else {
        (num / den, false)
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix, labels: &[&str], split: &str) -> Result<MetricsReport> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::Data("cannot compute metrics of an empty confusion matrix".into()));
    }
    if labels.len() != cm.classes() {
        return Err(Error::shape("metric labels", &[cm.classes()], &[labels.len()]));
    }
    let mut per_class = Vec::with_capacity(cm.classes());
    for (c, label) in labels.iter().enumerate() {
        let tp = cm.get(c, c) as f64;
        let support = cm.row_sum(c);
        let (precision, precision_undefined) = safe_ratio(tp, cm.col_sum(c) as f64);
        let (recall, recall_undefined) = safe_ratio(tp, support as f64);
        let (f1, f1_undefined) = safe_ratio(2.0 * precision * recall, precision + recall);
        per_class.push(ClassMetrics {
            label: label.to_string(),
            precision,
            recall,
            f1,
            support,
            precision_undefined,
            recall_undefined,
            f1_undefined,
        });
    }
    let weighted_sum = |f: fn(&ClassMetrics) -> f64| -> f64 {
        per_class.iter().map(|m| m.support as f64 * f(m)).sum::<f64>() / n as f64
    };
    let weighted = Averages {
        precision: weighted_sum(|m| m.precision),
        // support·TP/support cancels to TP, so the weighted recall is the
        // accuracy; computing it that way keeps the identity exact in floats.
        recall: cm.correct() as f64 / n as f64,
        f1: weighted_sum(|m| m.f1),
    };
    let report = MetricsReport {
        split: split.to_string(),
        total: n,
        accuracy: cm.correct() as f64 / n as f64,
        per_class,
        weighted,
        confusion: cm.rows(),
    };
    if report.has_undefined() {
        log::warn!("{split}: some metrics had a zero denominator and are reported as 0");
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    const AB: [&str; 2] = ["a", "b"];

    #[test]
    fn symmetric_two_class() {
        let cm = ConfusionMatrix::from_rows(&[vec![8, 2], vec![2, 8]]).unwrap();
        let r = compute_metrics(&cm, &AB, "test").unwrap();
        assert_eq!(r.accuracy, 0.8);
        for c in &r.per_class {
            assert_eq!((c.precision, c.recall), (0.8, 0.8));
            assert!((c.f1 - 0.8).abs() < 1e-15);
        }
        assert!(!r.has_undefined());
    }

    #[test]
    fn perfect_diagonal() {
        let cm = ConfusionMatrix::from_rows(&[vec![3, 0, 0], vec![0, 5, 0], vec![0, 0, 2]]).unwrap();
        let r = compute_metrics(&cm, &["x", "y", "z"], "t").unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.weighted, Averages { precision: 1.0, recall: 1.0, f1: 1.0 });
    }

    #[test]
    fn zero_denominator_convention() {
        let cm = ConfusionMatrix::from_rows(&[vec![5, 0], vec![5, 0]]).unwrap();
        let r = compute_metrics(&cm, &AB, "t").unwrap();
        assert_eq!(r.accuracy, 0.5);
        let b = &r.per_class[1];
        assert_eq!((b.precision, b.recall, b.f1), (0.0, 0.0, 0.0));
        assert!(b.precision_undefined && b.f1_undefined && !b.recall_undefined);
        let a = &r.per_class[0];
        assert_eq!((a.precision, a.recall), (0.5, 1.0));
        assert!((r.weighted.f1 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.weighted.precision, 0.25);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert!(compute_metrics(&ConfusionMatrix::new(2), &AB, "t").is_err());
    }

    #[test]
    fn out_of_range_label() {
        assert!(ConfusionMatrix::from_labels(&[0, 2], &[0, 1], 2).is_err());
    }

    #[test]
    fn weighted_recall_is_accuracy_on_random_matrices() {
        let mut rng = Rng::new(8);
        for _ in 0..500 {
            let c = 2 + rng.below(4);
            let n = 1 + rng.below(60);
            let truth: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
            let pred: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
            let cm = ConfusionMatrix::from_labels(&truth, &pred, c).unwrap();
            let labels: Vec<String> = (0..c).map(|i| i.to_string()).collect();
            let labels: Vec<&str> = labels.iter().map(String::as_str).collect();
            let r = compute_metrics(&cm, &labels, "t").unwrap();
            assert_eq!(r.weighted.recall, r.accuracy);
            assert_eq!(cm.total(), n as u64);
        }
    }

    #[test]
    fn csv_layout() {
        let cm = ConfusionMatrix::from_rows(&[vec![1, 2], vec![3, 4]]).unwrap();
        assert_eq!(cm.to_csv(&AB), "true\\pred,a,b\na,1,2\nb,3,4\n");
    }
}
