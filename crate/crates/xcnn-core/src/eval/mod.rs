//! Confusion matrices, macro precision/recall/F1, and one-vs-rest ROC
//! curves with exact AUC.
//!
//! AUC is kept as an exact rational (numerator over 2·P·N) so the
//! trapezoidal sweep can be checked against the pairwise ordering statistic
//! P(s⁺ > s⁻) + ½P(tie) with integer equality, not a tolerance. Degenerate
//! per-class metrics follow the 0-by-convention rule and are flagged rather
//! than silently averaged away.

use thiserror::Error;

use crate::nn::{Classifier, ModelError};
use crate::tensor::{argmax_row, Element, Tensor};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("paired lists differ in length ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("ROC is undefined: {positives} positives, {negatives} negatives")]
    UndefinedAuc { positives: usize, negatives: usize },
    #[error("ROC scores must be finite")]
    NonFiniteScore,
    #[error("evaluation needs a non-empty split")]
    EmptySplit,
    #[error(transparent)]
    Model(#[from] ModelError),
}

// ── Confusion matrix ───────────────────────────────────────────────────

/// K×K counts; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_labels(truth: &[usize], pred: &[usize], k: usize) -> Result<Self, EvalError> {
        if truth.len() != pred.len() {
            return Err(EvalError::LengthMismatch {
                left: truth.len(),
                right: pred.len(),
            });
        }
        let mut counts = vec![0u64; k * k];
        for (&t, &p) in truth.iter().zip(pred) {
            for label in [t, p] {
                if label >= k {
                    return Err(EvalError::LabelRange { label, classes: k });
                }
            }
            counts[t * k + p] += 1;
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.k..(truth + 1) * self.k]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.count(i, i)).sum()
    }

    /// trace / total; 0 on an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    fn col_sum(&self, pred: usize) -> u64 {
        (0..self.k).map(|t| self.count(t, pred)).sum()
    }

    fn row_sum(&self, truth: usize) -> u64 {
        self.row(truth).iter().sum()
    }
}

// ── Precision / recall / F1 ────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// number of true samples of this class
    pub support: u64,
    /// true when any denominator was empty and 0-by-convention applied
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrfReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

/// Per-class and macro precision/recall/F1 plus accuracy. Macro averages
/// are unweighted and include degenerate classes at 0.
pub fn macro_prf1(cm: &ConfusionMatrix) -> PrfReport {
    let k = cm.classes();
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm.count(c, c);
        let predicted = cm.col_sum(c);
        let actual = cm.row_sum(c);
        let mut degenerate = false;
        let mut ratio = |num: u64, den: u64| {
            if den == 0 {
                degenerate = true;
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, actual);
        let f1 = if precision + recall == 0.0 {
            degenerate = true;
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support: actual,
            degenerate,
        });
    }
    let mean = |pick: fn(&ClassMetrics) -> f64| {
        per_class.iter().map(pick).sum::<f64>() / k as f64
    };
    PrfReport {
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        accuracy: cm.accuracy(),
        per_class,
    }
}

// ── ROC / AUC ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// score threshold that yields this point; +inf for the origin
    pub threshold: f64,
}

/// One-vs-rest ROC curve with the AUC held as an exact rational:
/// `auc_num / auc_den` where `auc_den = 2 · positives · negatives`.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc_num: u128,
    pub auc_den: u128,
}

impl RocCurve {
    pub fn auc(&self) -> f64 {
        self.auc_num as f64 / self.auc_den as f64
    }
}

/// Threshold sweep over distinct scores, ties grouped into a single step,
/// AUC by the trapezoidal rule (exact in integer arithmetic).
pub fn roc_curve(scores: &[f64], is_positive: &[bool]) -> Result<RocCurve, EvalError> {
    if scores.len() != is_positive.len() {
        return Err(EvalError::LengthMismatch {
            left: scores.len(),
            right: is_positive.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore);
    }
    let p = is_positive.iter().filter(|&&b| b).count();
    let n = is_positive.len() - p;
    if p == 0 || n == 0 {
        return Err(EvalError::UndefinedAuc {
            positives: p,
            negatives: n,
        });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0u128, 0u128);
    let mut auc_num = 0u128;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (prev_tp, prev_fp) = (tp, fp);
        while i < order.len() && scores[order[i]] == threshold {
            if is_positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // trapezoid over the tie group: Δfp · (tp before + tp after)
        auc_num += (fp - prev_fp) * (tp + prev_tp);
        points.push(RocPoint {
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
            threshold,
        });
    }
    Ok(RocCurve {
        points,
        auc_num,
        auc_den: 2 * p as u128 * n as u128,
    })
}

/// Brute-force ordering statistic Σ (2·[s⁺ > s⁻] + [s⁺ = s⁻]) over all
/// positive/negative pairs, over 2·P·N — the oracle the sweep must equal.
pub fn pairwise_auc(scores: &[f64], is_positive: &[bool]) -> Result<(u128, u128), EvalError> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(is_positive)
        .filter(|(_, &b)| b)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(is_positive)
        .filter(|(_, &b)| !b)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(EvalError::UndefinedAuc {
            positives: pos.len(),
            negatives: neg.len(),
        });
    }
    let mut num = 0u128;
    for &sp in &pos {
        for &sn in &neg {
            if sp > sn {
                num += 2;
            } else if sp == sn {
                num += 1;
            }
        }
    }
    Ok((num, 2 * pos.len() as u128 * neg.len() as u128))
}

// ── Full evaluation ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub prf: PrfReport,
    /// per class; `None` when the split lacks positives or negatives
    pub roc: Vec<Option<RocCurve>>,
    pub predictions: Vec<usize>,
}

impl MetricsReport {
    pub fn accuracy(&self) -> f64 {
        self.prf.accuracy
    }
}

fn row_range<E: Element>(t: &Tensor<E>, r0: usize, r1: usize) -> Tensor<E> {
    let per_row = t.data().len() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = r1 - r0;
    Tensor::new(shape, t.data()[r0 * per_row..r1 * per_row].to_vec()).expect("row slice")
}

/// Scores a classifier over one split: softmax probabilities, argmax
/// predictions with lowest-index tie-breaking, and the full metrics set.
/// Inference runs in chunks of `chunk` samples to bound peak memory.
pub fn evaluate<E: Element, C: Classifier<E>>(
    clf: &C,
    input: &Tensor<E>,
    labels: &[usize],
    class_names: &[String],
    chunk: usize,
) -> Result<MetricsReport, EvalError> {
    let n = input.shape()[0];
    if n == 0 || labels.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    if n != labels.len() {
        return Err(EvalError::LengthMismatch {
            left: n,
            right: labels.len(),
        });
    }
    let k = clf.classes();
    if class_names.len() != k {
        return Err(EvalError::LengthMismatch {
            left: class_names.len(),
            right: k,
        });
    }
    for &label in labels {
        if label >= k {
            return Err(EvalError::LabelRange { label, classes: k });
        }
    }

    let chunk = chunk.max(1);
    let mut predictions = Vec::with_capacity(n);
    let mut probs = vec![0.0f64; n * k];
    let mut r0 = 0;
    while r0 < n {
        let r1 = (r0 + chunk).min(n);
        let batch = row_range(input, r0, r1);
        let out = clf.predict_probs(&batch)?;
        for (i, row) in out.data().chunks(k).enumerate() {
            predictions.push(argmax_row(row));
            for (j, &v) in row.iter().enumerate() {
                probs[(r0 + i) * k + j] = v.to_f64();
            }
        }
        r0 = r1;
    }

    let confusion = ConfusionMatrix::from_labels(labels, &predictions, k)?;
    let prf = macro_prf1(&confusion);
    let mut roc = Vec::with_capacity(k);
    for c in 0..k {
        let scores: Vec<f64> = (0..n).map(|i| probs[i * k + c]).collect();
        let is_pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        match roc_curve(&scores, &is_pos) {
            Ok(curve) => roc.push(Some(curve)),
            Err(EvalError::UndefinedAuc { .. }) => roc.push(None),
            Err(e) => return Err(e),
        }
    }
    Ok(MetricsReport {
        class_names: class_names.to_vec(),
        confusion,
        prf,
        roc,
        predictions,
    })
}

// ── CSV renderers ──────────────────────────────────────────────────────

/// K×K counts with class names on both axes.
pub fn confusion_csv(cm: &ConfusionMatrix, class_names: &[String]) -> String {
    let mut out = String::from("true/pred");
    for name in class_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (t, name) in class_names.iter().enumerate() {
        out.push_str(name);
        for p in 0..cm.classes() {
            out.push_str(&format!(",{}", cm.count(t, p)));
        }
        out.push('\n');
    }
    out
}

/// One row per class plus the macro row.
pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut out = String::from("class,precision,recall,f1,support,auc,degenerate\n");
    for (c, m) in report.prf.per_class.iter().enumerate() {
        let auc = match &report.roc[c] {
            Some(curve) => format!("{}", curve.auc()),
            None => "undefined".to_string(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            report.class_names[c], m.precision, m.recall, m.f1, m.support, auc, m.degenerate
        ));
    }
    out.push_str(&format!(
        "macro,{},{},{},{},,\n",
        report.prf.macro_precision,
        report.prf.macro_recall,
        report.prf.macro_f1,
        report.confusion.total()
    ));
    out
}

/// `fpr,tpr,threshold` rows for one class's curve.
pub fn roc_csv(curve: &RocCurve) -> String {
    let mut out = String::from("fpr,tpr,threshold\n");
    for pt in &curve.points {
        out.push_str(&format!("{},{},{}\n", pt.fpr, pt.tpr, pt.threshold));
    }
    out
}
