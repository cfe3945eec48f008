//! Classification metrics: confusion matrix, per-class report, AUC.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[truth][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::shape("confusion matrix", &[truth.len()], &[predicted.len()]));
        }
        let mut counts = vec![vec![0; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::Data(format!("label {} out of range for {num_classes} classes", t.max(p))));
            }
            counts[t][p] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, c: usize) -> usize {
        self.counts[c].iter().sum()
    }

    pub fn predicted(&self, c: usize) -> usize {
        self.counts.iter().map(|row| row[c]).sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.num_classes()).map(|c| self.counts[c][c]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// Set when the class was never predicted, so precision is 0 by convention.
    pub precision_undefined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub classes: Vec<ClassMetrics>,
    pub accuracy: f64,
    /// Unweighted mean of per-class recall.
    pub mean_recall: f64,
    pub macro_f1: f64,
    pub total: usize,
    pub confusion: ConfusionMatrix,
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ClassificationReport {
    pub fn new(truth: &[usize], predicted: &[usize], labels: &[&str]) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::Data("cannot score an empty prediction set".into()));
        }
        let confusion = ConfusionMatrix::new(truth, predicted, labels.len())?;
        let classes: Vec<ClassMetrics> = labels
            .iter()
            .enumerate()
            .map(|(c, label)| {
                let tp = confusion.counts[c][c];
                let predicted = confusion.predicted(c);
                let support = confusion.support(c);
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                ClassMetrics {
                    label: label.to_string(),
                    precision,
                    recall,
                    f1: f1_score(precision, recall),
                    support,
                    precision_undefined: predicted == 0,
                }
            })
            .collect();
        let present: Vec<&ClassMetrics> = classes.iter().filter(|c| c.support > 0).collect();
        let k = present.len().max(1) as f64;
        Ok(ClassificationReport {
            accuracy: ratio(confusion.correct(), confusion.total()),
            mean_recall: present.iter().map(|c| c.recall).sum::<f64>() / k,
            macro_f1: present.iter().map(|c| c.f1).sum::<f64>() / k,
            total: confusion.total(),
            classes,
            confusion,
        })
    }

    pub fn class(&self, label: &str) -> Option<&ClassMetrics> {
        self.classes.iter().find(|c| c.label == label)
    }

    /// Fixed-width table: one row per class, then accuracy and averages.
    pub fn to_table(&self) -> String {
        let width = self.classes.iter().map(|c| c.label.len()).max().unwrap_or(0).max(12);
        let mut s = String::new();
        let _ = writeln!(s, "{:>width$} {:>9} {:>9} {:>9} {:>9}", "", "precision", "recall", "f1-score", "support");
        s.push('\n');
        for c in &self.classes {
            let flag = if c.precision_undefined { "*" } else { "" };
            let _ = writeln!(
                s,
                "{:>width$} {:>9} {:>9.2} {:>9.2} {:>9}",
                c.label,
                format!("{:.2}{flag}", c.precision),
                c.recall,
                c.f1,
                c.support
            );
        }
        s.push('\n');
        let _ = writeln!(s, "{:>width$} {:>9} {:>9} {:>9.2} {:>9}", "accuracy", "", "", self.accuracy, self.total);
        let n = self.classes.len() as f64;
        let macro_p = self.classes.iter().map(|c| c.precision).sum::<f64>() / n;
        let macro_r = self.classes.iter().map(|c| c.recall).sum::<f64>() / n;
        let macro_f = self.classes.iter().map(|c| c.f1).sum::<f64>() / n;
        let _ = writeln!(s, "{:>width$} {:>9.2} {:>9.2} {:>9.2} {:>9}", "macro avg", macro_p, macro_r, macro_f, self.total);
        let t = self.total.max(1) as f64;
        let wavg = |f: fn(&ClassMetrics) -> f64| self.classes.iter().map(|c| f(c) * c.support as f64).sum::<f64>() / t;
        let _ = writeln!(
            s,
            "{:>width$} {:>9.2} {:>9.2} {:>9.2} {:>9}",
            "weighted avg",
            wavg(|c| c.precision),
            wavg(|c| c.recall),
            wavg(|c| c.f1),
            self.total
        );
        if self.classes.iter().any(|c| c.precision_undefined) {
            s.push_str("\n* class never predicted; precision set to 0\n");
        }
        s
    }
}

/// Area under the ROC curve via the Mann-Whitney statistic: the share of
/// (positive, negative) pairs ranked correctly, ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("auc scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc(format!("{pos} positive and {neg} negative labels")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] != 0).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryReport {
    pub auc: f64,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// Scores are probabilities; a sample is flagged positive at `>= threshold`.
pub fn binary_report(probs: &[f64], labels: &[u8], threshold: f64) -> Result<BinaryReport> {
    let area = auc(probs, labels)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in probs.iter().zip(labels) {
        match (p >= threshold, l != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Ok(BinaryReport {
        auc: area,
        threshold,
        precision,
        recall,
        f1: f1_score(precision, recall),
        accuracy: ratio(tp + tn, probs.len()),
        positives: tp + fn_,
        negatives: tn + fp,
    })
}
