//! Confusion-matrix metrics with macro averaging, one-vs-rest ROC/AUC, and
//! report files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Cssda, InferenceRoute};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|r| r.len() != k) {
            return Err(Error::arg("confusion matrix must be square and non-empty"));
        }
        Ok(Self { counts })
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// `(tp, fp, fn)` for `class` against the rest.
    pub fn one_vs_rest(&self, class: usize) -> (u64, u64, u64) {
        let tp = self.counts[class][class];
        let fp = (0..self.k()).filter(|&t| t != class).map(|t| self.counts[t][class]).sum();
        let fn_ = (0..self.k()).filter(|&p| p != class).map(|p| self.counts[class][p]).sum();
        (tp, fp, fn_)
    }
}

pub fn confusion(true_labels: &[usize], predicted: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if true_labels.len() != predicted.len() {
        return Err(Error::arg(format!(
            "{} true labels but {} predictions",
            true_labels.len(),
            predicted.len()
        )));
    }
    if k == 0 {
        return Err(Error::arg("k must be positive"));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&t, &p) in true_labels.iter().zip(predicted) {
        if t >= k || p >= k {
            return Err(Error::arg(format!("label pair ({t}, {p}) outside 0..{k}")));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// `num / den`, or 0 when the denominator is 0.
fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn f_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Binary balanced accuracy, the mean of sensitivity and specificity.
pub fn balanced_accuracy_binary(tp: u64, fn_: u64, tn: u64, fp: u64) -> f64 {
    (ratio(tp, tp + fn_).0 + ratio(tn, tn + fp).0) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroMetrics {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f_score: f64,
    pub balanced_accuracy: f64,
    /// Human-readable notes for every 0/0 replaced by 0.
    pub zero_division: Vec<String>,
}

/// One-vs-rest precision/recall/F per class, unweighted means, and balanced
/// accuracy as the mean per-class recall.
pub fn macro_metrics(cm: &ConfusionMatrix) -> Result<MacroMetrics> {
    if cm.total() == 0 {
        return Err(Error::data("confusion matrix has no samples"));
    }
    let k = cm.k();
    let mut per_class = Vec::with_capacity(k);
    let mut zero_division = Vec::new();
    for c in 0..k {
        let (tp, fp, fn_) = cm.one_vs_rest(c);
        let (precision, p0) = ratio(tp, tp + fp);
        let (recall, r0) = ratio(tp, tp + fn_);
        if p0 {
            zero_division.push(format!("precision of class {c}"));
        }
        if r0 {
            zero_division.push(format!("recall of class {c}"));
        }
        per_class.push(ClassMetrics {
            class: c.to_string(),
            precision,
            recall,
            f_score: f_score(precision, recall),
        });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    let macro_recall = mean(|m| m.recall);
    Ok(MacroMetrics {
        macro_precision: mean(|m| m.precision),
        macro_recall,
        macro_f_score: mean(|m| m.f_score),
        balanced_accuracy: macro_recall,
        per_class,
        zero_division,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub true_positive_rate: f64,
    pub false_positive_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRoc {
    /// `None` when the class has no positives or no negatives.
    pub auc: Option<f64>,
    /// One point per distinct score, thresholds descending, after the
    /// origin.
    pub points: Vec<RocPoint>,
}

/// Rank-based AUC of one binary problem: the chance a random positive
/// outscores a random negative, ties counted half. Exact integer counting.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let positives = positive.iter().filter(|&&p| p).count() as u128;
    let negatives = scores.len() as u128 - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    // twice the Mann-Whitney U statistic
    let mut doubled_u: u128 = 0;
    let mut negatives_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if positive[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        doubled_u += 2 * pos * negatives_below + pos * neg;
        negatives_below += neg;
        i = j;
    }
    Some(doubled_u as f64 / (2 * positives * negatives) as f64)
}

fn roc_points(scores: &[f64], positive: &[bool]) -> Vec<RocPoint> {
    let positives = positive.iter().filter(|&&p| p).count();
    let negatives = scores.len() - positives;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let rate = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        true_positive_rate: 0.0,
        false_positive_rate: 0.0,
    }];
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            true_positive_rate: rate(tp, positives),
            false_positive_rate: rate(fp, negatives),
        });
    }
    points
}

/// One-vs-rest ROC for every class from per-sample probability vectors.
pub fn roc_auc(scores: &[Vec<f64>], true_labels: &[usize]) -> Result<Vec<ClassRoc>> {
    if scores.len() != true_labels.len() {
        return Err(Error::arg("score and label counts differ"));
    }
    let k = scores.first().map_or(0, Vec::len);
    if k == 0 {
        return Err(Error::arg("no scores"));
    }
    for (i, row) in scores.iter().enumerate() {
        if row.len() != k {
            return Err(Error::arg(format!("score row {i} has {} entries, expected {k}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("score row {i} is not finite")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::arg(format!("score row {i} sums to {sum}, not 1")));
        }
    }
    if let Some(&bad) = true_labels.iter().find(|&&l| l >= k) {
        return Err(Error::arg(format!("label {bad} outside 0..{k}")));
    }
    Ok((0..k)
        .map(|c| {
            let class_scores: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let positive: Vec<bool> = true_labels.iter().map(|&l| l == c).collect();
            ClassRoc {
                auc: binary_auc(&class_scores, &positive),
                points: roc_points(&class_scores, &positive),
            }
        })
        .collect())
}

/// Serialized evaluation summary. Field order is the file's key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub balanced_accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f_score: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Per-class one-vs-rest AUC; `null` when undefined.
    pub auc: Vec<Option<f64>>,
    pub confusion: Vec<Vec<u64>>,
    /// Metrics that hit a 0/0 or an undefined AUC.
    pub flags: Vec<String>,
}

impl MetricsReport {
    pub fn new(cm: &ConfusionMatrix, rocs: &[ClassRoc], class_names: &[String]) -> Result<Self> {
        let mut m = macro_metrics(cm)?;
        if class_names.len() != cm.k() || rocs.len() != cm.k() {
            return Err(Error::arg("class names, ROC curves, and matrix disagree on k"));
        }
        for (metrics, name) in m.per_class.iter_mut().zip(class_names) {
            metrics.class = name.clone();
        }
        let mut flags = m.zero_division;
        for (c, roc) in rocs.iter().enumerate() {
            if roc.auc.is_none() {
                flags.push(format!("auc of class {c} undefined"));
            }
        }
        Ok(Self {
            balanced_accuracy: m.balanced_accuracy,
            macro_precision: m.macro_precision,
            macro_recall: m.macro_recall,
            macro_f_score: m.macro_f_score,
            per_class: m.per_class,
            auc: rocs.iter().map(|r| r.auc).collect(),
            confusion: cm.counts().to_vec(),
            flags,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::data(format!("report serialization: {e}")))
    }

    /// One row per class plus a final `macro` row; balanced accuracy and
    /// mean defined AUC appear on the macro row.
    pub fn to_csv(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let mut out = String::from("class,precision,recall,f_score,auc,balanced_accuracy\n");
        for (m, auc) in self.per_class.iter().zip(&self.auc) {
            out.push_str(&format!(
                "{},{},{},{},{},\n",
                m.class,
                m.precision,
                m.recall,
                m.f_score,
                fmt_opt(*auc)
            ));
        }
        let defined: Vec<f64> = self.auc.iter().flatten().copied().collect();
        let mean_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        out.push_str(&format!(
            "macro,{},{},{},{},{}\n",
            self.macro_precision,
            self.macro_recall,
            self.macro_f_score,
            fmt_opt(mean_auc),
            self.balanced_accuracy
        ));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

pub fn emit_report(report: &MetricsReport, path: &Path, format: ReportFormat) -> Result<()> {
    let body = match format {
        ReportFormat::Json => report.to_json()? + "\n",
        ReportFormat::Csv => report.to_csv(),
    };
    fs::write(path, body)?;
    Ok(())
}

/// Median of a non-empty sample; the mean of the middle pair for even
/// lengths. NaN for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    }
}

/// Scores every sample of a fully labeled dataset.
pub fn evaluate(model: &Cssda, dataset: &Dataset, route: InferenceRoute) -> Result<MetricsReport> {
    let k = dataset.vocab().k();
    if model.k() != k {
        return Err(Error::data(format!(
            "model has {} classes but the labels define {k}",
            model.k()
        )));
    }
    let mut truth = Vec::with_capacity(dataset.len());
    let mut predicted = Vec::with_capacity(dataset.len());
    let mut scores = Vec::with_capacity(dataset.len());
    for s in dataset.samples() {
        let label = s
            .label
            .ok_or_else(|| Error::data(format!("sample {} has no label; evaluation needs labels", s.id)))?;
        let p = model.predict(s.embedding.values(), route)?;
        truth.push(label);
        predicted.push(p.class);
        scores.push(p.probabilities);
    }
    let cm = confusion(&truth, &predicted, k)?;
    let rocs = roc_auc(&scores, &truth)?;
    MetricsReport::new(&cm, &rocs, dataset.vocab().names())
}
