//! Evaluation: confusion matrix, one-vs-rest sensitivity/specificity and
//! their harmonic mean, Mann-Whitney ROC AUC, multiclass accuracy, and the
//! report CSV format.

use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::train::Classifier;

/// Row-major `C x C` counts; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn count(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.class_count() + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.class_count()).map(|i| self.count(i, i)).sum()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn with_names(mut self, names: &[String]) -> Self {
        if names.len() == self.class_names.len() {
            self.class_names = names.to_vec();
        }
        self
    }
}

/// Count (true, predicted) pairs into a confusion matrix.
pub fn confusion(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Contract(format!(
            "{} true labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut counts = vec![0u64; classes * classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= classes || p >= classes {
            return Err(Error::Contract(format!(
                "label ({t}, {p}) out of range for {classes} classes"
            )));
        }
        counts[t * classes + p] += 1;
    }
    Ok(ConfusionMatrix {
        counts,
        class_names: (0..classes).map(|c| c.to_string()).collect(),
    })
}

/// Sensitivity and specificity after a one-vs-rest collapse. A zero
/// denominator yields `None` rather than a NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinaryRates {
    pub sen: Option<f64>,
    pub spe: Option<f64>,
}

pub fn binary_rates(cm: &ConfusionMatrix, positive: usize) -> Result<BinaryRates> {
    let c = cm.class_count();
    if positive >= c {
        return Err(Error::Contract(format!(
            "positive class {positive} out of range for {c} classes"
        )));
    }
    let tp = cm.count(positive, positive);
    let r#fn = (0..c)
        .filter(|&j| j != positive)
        .map(|j| cm.count(positive, j))
        .sum::<u64>();
    let fp = (0..c)
        .filter(|&i| i != positive)
        .map(|i| cm.count(i, positive))
        .sum::<u64>();
    let tn = cm.total() - tp - r#fn - fp;
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    Ok(BinaryRates {
        sen: ratio(tp, tp + r#fn),
        spe: ratio(tn, tn + fp),
    })
}

/// `2 * sen * spe / (sen + spe)`, zero when both rates are zero.
pub fn harmonic_mean(sen: f64, spe: f64) -> f64 {
    let sum = sen + spe;
    if sum == 0.0 {
        0.0
    } else {
        2.0 * sen * spe / sum
    }
}

/// Mann-Whitney AUC: the probability that a positive outranks a negative,
/// ties earning half credit. Computed via midranks in `O(n log n)`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("non-finite score".into()));
    }
    let n_pos = labels.iter().filter(|&&b| b).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(
            "AUC needs at least one positive and one negative sample".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based midrank of the tie group [i, j].
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &s in &idx[i..=j] {
            if labels[s] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// Full evaluation result for one model on one test split.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub sen: f64,
    pub spe: f64,
    pub hm: f64,
    pub auc: f64,
    pub acc: f64,
    pub positive_class: String,
    pub confusion: ConfusionMatrix,
}

/// Build a report from per-sample class probabilities. The AUC score of each
/// sample is its probability of the positive class; predictions are argmax.
pub fn report_from_scores(
    probs: &[Vec<f64>],
    y_true: &[usize],
    class_names: &[String],
    positive_class: &str,
) -> Result<EvalReport> {
    let positive = class_names
        .iter()
        .position(|n| n == positive_class)
        .ok_or_else(|| {
            Error::Contract(format!(
                "positive class {positive_class} not among {class_names:?}"
            ))
        })?;
    if probs.len() != y_true.len() {
        return Err(Error::Contract(format!(
            "{} probability rows vs {} labels",
            probs.len(),
            y_true.len()
        )));
    }
    let classes = class_names.len();
    let y_pred: Vec<usize> = probs
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect();
    let cm = confusion(y_true, &y_pred, classes)?.with_names(class_names);
    let rates = binary_rates(&cm, positive)?;
    let (Some(sen), Some(spe)) = (rates.sen, rates.spe) else {
        return Err(Error::Metric(
            "test split lacks positive or negative samples".into(),
        ));
    };
    let scores: Vec<f64> = probs.iter().map(|row| row[positive]).collect();
    let binary: Vec<bool> = y_true.iter().map(|&t| t == positive).collect();
    let auc = roc_auc(&scores, &binary)?;
    let acc = cm.trace() as f64 / cm.total() as f64;
    Ok(EvalReport {
        sen,
        spe,
        hm: harmonic_mean(sen, spe),
        auc,
        acc,
        positive_class: positive_class.to_string(),
        confusion: cm,
    })
}

/// Evaluate a classifier on a test dataset with one-vs-rest positives.
pub fn evaluate<S: Scalar>(
    model: &mut Classifier<S>,
    test: &Dataset,
    positive_class: &str,
) -> Result<EvalReport> {
    if model.class_count != test.class_count() {
        return Err(Error::Contract(format!(
            "model has {} classes, dataset {}",
            model.class_count,
            test.class_count()
        )));
    }
    let probs = model.predict_proba(test, 128)?;
    report_from_scores(&probs, &test.labels, &test.class_names, positive_class)
}

/// Report CSV: `metric,value` rows (sen, spe, hm, auc, acc in that order)
/// followed by a confusion block with `pred_*` columns and `true_*` rows.
pub fn report_to_csv(report: &EvalReport) -> String {
    let mut out = String::from("metric,value\n");
    for (name, value) in [
        ("sen", report.sen),
        ("spe", report.spe),
        ("hm", report.hm),
        ("auc", report.auc),
        ("acc", report.acc),
    ] {
        out.push_str(&format!("{name},{value}\n"));
    }
    out.push_str("confusion,\n");
    let names = &report.confusion.class_names;
    out.push_str(&format!(
        ",{}\n",
        names
            .iter()
            .map(|n| format!("pred_{n}"))
            .collect::<Vec<_>>()
            .join(",")
    ));
    for (i, name) in names.iter().enumerate() {
        let row: Vec<String> = (0..names.len())
            .map(|j| report.confusion.count(i, j).to_string())
            .collect();
        out.push_str(&format!("true_{name},{}\n", row.join(",")));
    }
    out
}

pub fn write_report_csv(report: &EvalReport, path: &Path) -> Result<()> {
    std::fs::write(path, report_to_csv(report))?;
    Ok(())
}
