//! Confusion-matrix accounting and the evaluation metric battery:
//! sensitivity (recall), specificity, precision, F1, AUC, and MCC, plus
//! uncertainty-threshold sweeps.
//!
//! Convention: the positive class is AF = 1. Any metric whose denominator
//! is zero reports 0.0 and is named in `zero_denominator`.

use std::fmt;

use serde::Serialize;

use crate::inference::Prediction;

#[derive(Debug)]
pub enum MetricsError {
    LengthMismatch { predictions: usize, labels: usize },
    EmptyInput,
    BadLabel(u8),
    UnsortedThresholds,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::LengthMismatch { predictions, labels } => {
                write!(f, "{} predictions vs {} labels", predictions, labels)
            }
            MetricsError::EmptyInput => write!(f, "no segments to evaluate"),
            MetricsError::BadLabel(l) => write!(f, "label {} outside {{0, 1}}", l),
            MetricsError::UnsortedThresholds => {
                write!(f, "thresholds must be sorted descending (none counts as infinity)")
            }
        }
    }
}

impl std::error::Error for MetricsError {}

/// Raw confusion counts with positive = AF = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// The six metrics at one operating point.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
    pub auc: f64,
    pub mcc: f64,
    pub counts: ConfusionCounts,
    /// Uncertainty threshold in effect; `None` means no filtering.
    pub threshold: Option<f64>,
    /// Fraction of segments abstained from under the threshold.
    pub abstention_rate: f64,
    /// Metrics that hit a zero denominator and were reported as 0.
    pub zero_denominator: Vec<&'static str>,
    /// Set when the threshold excluded every segment.
    pub empty: bool,
}

impl MetricsReport {
    fn empty_report(threshold: Option<f64>) -> Self {
        MetricsReport {
            sensitivity: 0.0,
            specificity: 0.0,
            precision: 0.0,
            f1: 0.0,
            auc: 0.0,
            mcc: 0.0,
            counts: ConfusionCounts { tp: 0, tn: 0, fp: 0, fn_: 0 },
            threshold,
            abstention_rate: 1.0,
            zero_denominator: vec![
                "sensitivity",
                "specificity",
                "precision",
                "f1",
                "auc",
                "mcc",
            ],
            empty: true,
        }
    }
}

/// Tally exact confusion counts from hard predictions.
pub fn compute_counts(predictions: &[u8], labels: &[u8]) -> Result<ConfusionCounts, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let mut counts = ConfusionCounts { tp: 0, tn: 0, fp: 0, fn_: 0 };
    for (&p, &y) in predictions.iter().zip(labels) {
        if p > 1 {
            return Err(MetricsError::BadLabel(p));
        }
        if y > 1 {
            return Err(MetricsError::BadLabel(y));
        }
        match (p, y) {
            (1, 1) => counts.tp += 1,
            (0, 0) => counts.tn += 1,
            (1, 0) => counts.fp += 1,
            (0, 1) => counts.fn_ += 1,
            _ => unreachable!(),
        }
    }
    Ok(counts)
}

/// Derive the six metrics from counts plus per-segment scores (the AF
/// probabilities) for AUC.
pub fn compute_metrics(
    counts: ConfusionCounts,
    scores: &[f64],
    labels: &[u8],
) -> Result<MetricsReport, MetricsError> {
    if scores.is_empty() || labels.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: scores.len(),
            labels: labels.len(),
        });
    }
    let mut zero = Vec::new();
    let (tp, tn, fp, fn_) = (counts.tp as f64, counts.tn as f64, counts.fp as f64, counts.fn_ as f64);

    let mut ratio = |name: &'static str, num: f64, den: f64| {
        if den == 0.0 {
            zero.push(name);
            0.0
        } else {
            num / den
        }
    };

    let sensitivity = ratio("sensitivity", tp, tp + fn_);
    let specificity = ratio("specificity", tn, tn + fp);
    let precision = ratio("precision", tp, tp + fp);
    let f1 = ratio("f1", 2.0 * precision * sensitivity, precision + sensitivity);

    let mcc_den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    let mcc = if mcc_den == 0.0 {
        zero.push("mcc");
        0.0
    } else {
        (tp * tn - fp * fn_) / mcc_den
    };

    let (auc, auc_defined) = rank_auc(scores, labels);
    if !auc_defined {
        zero.push("auc");
    }

    Ok(MetricsReport {
        sensitivity,
        specificity,
        precision,
        f1,
        auc,
        mcc,
        counts,
        threshold: None,
        abstention_rate: 0.0,
        zero_denominator: zero,
        empty: false,
    })
}

/// Rank-based AUC with average ranks on ties; equals the
/// Wilcoxon-Mann-Whitney statistic (ties count one half). Returns
/// `(0.0, false)` when either class is absent.
fn rank_auc(scores: &[f64], labels: &[u8]) -> (f64, bool) {
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return (0.0, false);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Average 1-based rank across the tie group [i, j].
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    (u / (n_pos as f64 * n_neg as f64), true)
}

/// One report per threshold, computed over accepted predictions only.
/// Thresholds must be sorted descending; `None` (no filtering) sorts as
/// infinity.
pub fn threshold_sweep(
    predictions: &[Prediction],
    labels: &[u8],
    thresholds: &[Option<f64>],
) -> Result<Vec<MetricsReport>, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let as_value = |t: &Option<f64>| t.unwrap_or(f64::INFINITY);
    for pair in thresholds.windows(2) {
        if as_value(&pair[0]) < as_value(&pair[1]) {
            return Err(MetricsError::UnsortedThresholds);
        }
    }

    let total = predictions.len() as f64;
    let mut reports = Vec::with_capacity(thresholds.len());
    for threshold in thresholds {
        let limit = as_value(threshold);
        let mut preds = Vec::new();
        let mut scores = Vec::new();
        let mut accepted_labels = Vec::new();
        for (p, &y) in predictions.iter().zip(labels) {
            if p.u_scalar <= limit {
                preds.push(p.label);
                scores.push(p.p_mean[1]);
                accepted_labels.push(y);
            }
        }
        if preds.is_empty() {
            reports.push(MetricsReport::empty_report(*threshold));
            continue;
        }
        let counts = compute_counts(&preds, &accepted_labels)?;
        let mut report = compute_metrics(counts, &scores, &accepted_labels)?;
        report.threshold = *threshold;
        report.abstention_rate = 1.0 - preds.len() as f64 / total;
        reports.push(report);
    }
    Ok(reports)
}

/// Plot-ready CSV rendering of a sweep.
pub fn sweep_to_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(
        "threshold,abstention_rate,sensitivity,specificity,precision,f1,auc,mcc\n",
    );
    for r in reports {
        let threshold = match r.threshold {
            Some(t) => format!("{}", t),
            None => "none".to_string(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            threshold,
            r.abstention_rate,
            r.sensitivity,
            r.specificity,
            r.precision,
            r.f1,
            r.auc,
            r.mcc
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_have_no_errors() {
        let labels = [1u8, 0, 1, 0, 1];
        let counts = compute_counts(&labels, &labels).unwrap();
        assert_eq!(counts.fp, 0);
        assert_eq!(counts.fn_, 0);
        assert_eq!(counts.tp, 3);
        assert_eq!(counts.tn, 2);
    }

    #[test]
    fn all_positive_predictor_on_balanced_set() {
        let preds = [1u8; 20];
        let labels: Vec<u8> = (0..20).map(|i| (i < 10) as u8).collect();
        let counts = compute_counts(&preds, &labels).unwrap();
        assert_eq!((counts.tp, counts.fp, counts.tn, counts.fn_), (10, 10, 0, 0));
    }

    #[test]
    fn counts_reject_length_mismatch() {
        assert!(matches!(
            compute_counts(&[1, 0], &[1]),
            Err(MetricsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn worked_confusion_table() {
        // tp=7 tn=5 fp=2 fn=1.
        let counts = ConfusionCounts { tp: 7, tn: 5, fp: 2, fn_: 1 };
        // Scores/labels only matter for AUC; use a separating set.
        let labels: Vec<u8> = vec![1; 8].into_iter().chain(vec![0; 7]).collect();
        let scores: Vec<f64> =
            (0..15).map(|i| if i < 8 { 0.9 } else { 0.1 }).collect();
        let m = compute_metrics(counts, &scores, &labels).unwrap();
        assert!((m.precision - 7.0 / 9.0).abs() < 1e-12);
        assert!((m.sensitivity - 7.0 / 8.0).abs() < 1e-12);
        assert!((m.f1 - 2.0 * (7.0 / 9.0) * (7.0 / 8.0) / (7.0 / 9.0 + 7.0 / 8.0)).abs() < 1e-12);
        let expected_mcc = (35.0 - 2.0) / (9.0f64 * 8.0 * 7.0 * 6.0).sqrt();
        assert!((m.mcc - expected_mcc).abs() < 1e-12, "mcc {} vs {}", m.mcc, expected_mcc);
        assert!((m.auc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_scores_auc_half() {
        let labels = [1u8, 0, 1, 0];
        let scores = [0.5f64; 4];
        let counts = compute_counts(&[1, 1, 1, 1], &labels).unwrap();
        let m = compute_metrics(counts, &scores, &labels).unwrap();
        assert!((m.auc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_denominator_flags() {
        // No positives at all: sensitivity, precision, f1, mcc, auc undefined.
        let labels = [0u8, 0, 0];
        let counts = compute_counts(&[0, 0, 0], &labels).unwrap();
        let m = compute_metrics(counts, &[0.1, 0.2, 0.3], &labels).unwrap();
        assert_eq!(m.sensitivity, 0.0);
        assert!(m.zero_denominator.contains(&"sensitivity"));
        assert!(m.zero_denominator.contains(&"auc"));
        assert!((m.specificity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn f1_is_harmonic_mean() {
        let counts = ConfusionCounts { tp: 13, tn: 9, fp: 4, fn_: 6 };
        let labels: Vec<u8> = vec![1; 19].into_iter().chain(vec![0; 13]).collect();
        let scores: Vec<f64> = (0..32).map(|i| i as f64 / 32.0).collect();
        let m = compute_metrics(counts, &scores, &labels).unwrap();
        let harmonic = 2.0 / (1.0 / m.precision + 1.0 / m.sensitivity);
        assert!((m.f1 - harmonic).abs() < 1e-9);
    }

    #[test]
    fn mcc_label_swap_flips_sign() {
        let counts = ConfusionCounts { tp: 7, tn: 5, fp: 2, fn_: 1 };
        let swapped = ConfusionCounts { tp: 5, tn: 7, fp: 1, fn_: 2 };
        let labels: Vec<u8> = vec![1; 8].into_iter().chain(vec![0; 7]).collect();
        let scores: Vec<f64> = (0..15).map(|i| i as f64 / 15.0).collect();
        let a = compute_metrics(counts, &scores, &labels).unwrap();
        let b = compute_metrics(swapped, &scores, &labels).unwrap();
        assert!((a.mcc - b.mcc).abs() < 1e-12, "swap keeps |MCC|: {} vs {}", a.mcc, b.mcc);
    }

    #[test]
    fn unsorted_thresholds_rejected() {
        let preds = vec![Prediction::point(0, 0.9, 0.01)];
        let labels = [1u8];
        let err = threshold_sweep(&preds, &labels, &[Some(0.01), Some(0.05)]);
        assert!(matches!(err, Err(MetricsError::UnsortedThresholds)));
    }

    #[test]
    fn infinite_threshold_equals_no_threshold() {
        let preds = vec![
            Prediction::point(1, 0.9, 0.2),
            Prediction::point(0, 0.3, 0.01),
            Prediction::point(1, 0.6, 0.12),
        ];
        let labels = [1u8, 0, 0];
        let reports =
            threshold_sweep(&preds, &labels, &[None, Some(f64::INFINITY)]).unwrap();
        assert_eq!(reports[0].counts, reports[1].counts);
        assert_eq!(reports[0].f1, reports[1].f1);
        assert_eq!(reports[0].auc, reports[1].auc);
        assert_eq!(reports[0].abstention_rate, reports[1].abstention_rate);
    }

    #[test]
    fn sweep_none_and_exclusion() {
        let preds = vec![
            Prediction::point(0, 0.9, 0.2),
            Prediction::point(1, 0.8, 0.004),
        ];
        let labels = [1u8, 1];
        let reports =
            threshold_sweep(&preds, &labels, &[None, Some(0.05), Some(0.001)]).unwrap();
        assert_eq!(reports.len(), 3);
        assert_eq!(reports[0].counts.total(), 2);
        assert_eq!(reports[0].abstention_rate, 0.0);
        assert_eq!(reports[1].counts.total(), 1);
        assert!((reports[1].abstention_rate - 0.5).abs() < 1e-12);
        assert!(reports[2].empty);
        assert_eq!(reports[2].abstention_rate, 1.0);
    }
}
