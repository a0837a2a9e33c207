//! The MSA evaluation suite: MAE, Pearson correlation, seven-interval
//! accuracy, and binary accuracy / F1 under both zero-handling conventions.

use crate::data::{round_to_interval, LabelRange};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub corr: f64,
    pub acc7: f64,
    /// Negative vs non-negative, zero-labeled samples included.
    pub acc2_nonneg: f64,
    pub f1_nonneg: f64,
    /// Negative vs positive, zero-labeled samples excluded.
    pub acc2_pos: f64,
    pub f1_pos: f64,
    pub n_nonneg: usize,
    pub n_pos: usize,
    /// Constant predictions or labels; `corr` is reported as 0.
    pub degenerate_corr: bool,
}

impl MetricsReport {
    /// Aligned table in the conventional column order; accuracy and F1 show
    /// the zero-included and zero-excluded settings as `A/B`.
    pub fn table(&self, decimals: usize) -> String {
        let d = decimals;
        let acc2 = format!("{:.d$}/{:.d$}", self.acc2_nonneg, self.acc2_pos);
        let f1 = format!("{:.d$}/{:.d$}", self.f1_nonneg, self.f1_pos);
        let headers = ["MAE", "Corr", "Acc-7", "Acc-2", "F1"];
        let values = [
            format!("{:.d$}", self.mae),
            format!("{:.d$}", self.corr),
            format!("{:.d$}", self.acc7),
            acc2,
            f1,
        ];
        let widths: Vec<usize> = headers
            .iter()
            .zip(&values)
            .map(|(h, v)| h.len().max(v.len()))
            .collect();
        let mut out = String::new();
        for (i, h) in headers.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            out.push_str(&format!("{h:>w$}", w = widths[i]));
        }
        out.push('\n');
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            out.push_str(&format!("{v:>w$}", w = widths[i]));
        }
        out.push('\n');
        out
    }
}

fn pearson(preds: &[f64], labels: &[f64]) -> (f64, bool) {
    let constant = |xs: &[f64]| xs.iter().all(|&x| x == xs[0]);
    if constant(preds) || constant(labels) {
        return (0.0, true);
    }
    let n = preds.len() as f64;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / n;
    let (mp, ml) = (mean(preds), mean(labels));
    let mut cov = 0.0;
    let mut var_p = 0.0;
    let mut var_l = 0.0;
    for (&p, &l) in preds.iter().zip(labels) {
        cov += (p - mp) * (l - ml);
        var_p += (p - mp) * (p - mp);
        var_l += (l - ml) * (l - ml);
    }
    (cov / (var_p * var_l).sqrt(), false)
}

/// Two-class accuracy and support-weighted F1. `classify` maps a value to
/// `true` for the positive-side class.
fn binary_metrics(preds: &[f64], labels: &[f64], classify: impl Fn(f64) -> bool) -> (f64, f64) {
    let n = preds.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mut correct = 0usize;
    // Confusion counts indexed by [pred_class][label_class].
    let mut counts = [[0usize; 2]; 2];
    for (&p, &l) in preds.iter().zip(labels) {
        let (cp, cl) = (classify(p), classify(l));
        if cp == cl {
            correct += 1;
        }
        counts[usize::from(cp)][usize::from(cl)] += 1;
    }
    let mut weighted_f1 = 0.0;
    for class in 0..2 {
        let tp = counts[class][class] as f64;
        let pred_count = (counts[class][0] + counts[class][1]) as f64;
        let label_count = (counts[0][class] + counts[1][class]) as f64;
        let precision = if pred_count > 0.0 { tp / pred_count } else { 0.0 };
        let recall = if label_count > 0.0 { tp / label_count } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        weighted_f1 += (label_count / n as f64) * f1;
    }
    (correct as f64 / n as f64, weighted_f1)
}

/// Evaluate one prediction run against ground truth.
pub fn compute_metrics(preds: &[f64], labels: &[f64], range: LabelRange) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::InvalidInput("empty evaluation batch".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if !preds.iter().chain(labels).all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("non-finite prediction or label".into()));
    }

    let n = preds.len();
    let mae = preds
        .iter()
        .zip(labels)
        .map(|(&p, &l)| (p - l).abs())
        .sum::<f64>()
        / n as f64;
    let (corr, degenerate_corr) = pearson(preds, labels);

    let mut acc7_hits = 0usize;
    for (&p, &l) in preds.iter().zip(labels) {
        if round_to_interval(p, range)? == round_to_interval(l, range)? {
            acc7_hits += 1;
        }
    }
    let acc7 = acc7_hits as f64 / n as f64;

    // Setting A: negative vs non-negative over all samples.
    let (acc2_nonneg, f1_nonneg) = binary_metrics(preds, labels, |x| x >= 0.0);

    // Setting B: drop zero labels, negative vs positive.
    let kept: Vec<(f64, f64)> = preds
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l != 0.0)
        .map(|(&p, &l)| (p, l))
        .collect();
    let pos_preds: Vec<f64> = kept.iter().map(|&(p, _)| p).collect();
    let pos_labels: Vec<f64> = kept.iter().map(|&(_, l)| l).collect();
    let (acc2_pos, f1_pos) = binary_metrics(&pos_preds, &pos_labels, |x| x >= 0.0);

    Ok(MetricsReport {
        mae,
        corr,
        acc7,
        acc2_nonneg,
        f1_nonneg,
        acc2_pos,
        f1_pos,
        n_nonneg: n,
        n_pos: kept.len(),
        degenerate_corr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn range() -> LabelRange {
        LabelRange::default()
    }

    #[test]
    fn perfect_predictions() {
        let v = [-2.4, 0.0, 1.7];
        let r = compute_metrics(&v, &v, range()).unwrap();
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.corr, 1.0);
        assert_eq!(r.acc7, 1.0);
        assert_eq!(r.acc2_nonneg, 1.0);
        assert_eq!(r.acc2_pos, 1.0);
        assert_eq!(r.f1_nonneg, 1.0);
        assert_eq!(r.f1_pos, 1.0);
        assert_eq!(r.n_nonneg, 3);
        assert_eq!(r.n_pos, 2);
        assert!(!r.degenerate_corr);
    }

    #[test]
    fn single_sample_sign_flip() {
        let r = compute_metrics(&[0.2], &[-0.2], range()).unwrap();
        // Setting A: prediction non-negative, label negative.
        assert_eq!(r.acc2_nonneg, 0.0);
        // Setting B keeps the sample; positive vs negative.
        assert_eq!(r.n_pos, 1);
        assert_eq!(r.acc2_pos, 0.0);
        assert!(r.degenerate_corr);
        assert_eq!(r.corr, 0.0);
    }

    #[test]
    fn zero_label_classes_as_non_negative() {
        // Classes per the rule (negative iff x < 0): every pair here agrees
        // in setting A, and setting B drops the zero-labeled sample.
        let preds = [1.0, -1.0, 0.5, -0.5];
        let labels = [2.0, -2.0, 0.0, -1.0];
        let r = compute_metrics(&preds, &labels, range()).unwrap();
        assert_eq!(r.acc2_nonneg, 1.0);
        assert_eq!(r.f1_nonneg, 1.0);
        assert_eq!(r.n_pos, 3);
        assert_eq!(r.acc2_pos, 1.0);
        assert_eq!(r.f1_pos, 1.0);
    }

    #[test]
    fn hand_computed_confusion_matrices() {
        let preds = [0.5, -1.2, 0.3, -0.7, 2.0];
        let labels = [1.0, 0.0, -1.0, -2.0, 1.5];
        let r = compute_metrics(&preds, &labels, range()).unwrap();

        assert!((r.mae - 0.96).abs() < 1e-12);
        // Hand-computed sums: cov 4.69, var_p 6.108, var_l 8.2.
        let corr = 4.69 / (6.108f64 * 8.2).sqrt();
        assert!((r.corr - corr).abs() < 1e-12);
        // Rounded preds [1,-1,0,-1,2] vs labels [1,0,-1,-2,2]: 2 hits.
        assert!((r.acc7 - 0.4).abs() < 1e-12);
        // Setting A: preds [P,N,P,N,P] vs labels [P,P,N,N,P] -> 3/5 correct;
        // weighted F1 = 3/5 * 2/3 + 2/5 * 1/2 = 0.6.
        assert!((r.acc2_nonneg - 0.6).abs() < 1e-12);
        assert!((r.f1_nonneg - 0.6).abs() < 1e-12);
        // Setting B drops index 1: preds [P,P,N,P] vs labels [P,N,N,P].
        assert_eq!(r.n_pos, 4);
        assert!((r.acc2_pos - 0.75).abs() < 1e-12);
        // Weighted F1 = 1/2 * 4/5 + 1/2 * 2/3 = 11/15.
        assert!((r.f1_pos - 11.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_linear_relation_has_unit_corr() {
        let r = compute_metrics(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], range()).unwrap();
        assert!((r.corr - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_variance_flags() {
        let r = compute_metrics(&[0.1, 0.1, 0.1], &[1.0, 2.0, 3.0], range()).unwrap();
        assert!(r.degenerate_corr);
        assert_eq!(r.corr, 0.0);
        let r = compute_metrics(&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5], range()).unwrap();
        assert!(r.degenerate_corr);
        assert_eq!(r.corr, 0.0);
    }

    #[test]
    fn input_validation() {
        assert!(compute_metrics(&[], &[], range()).is_err());
        assert!(compute_metrics(&[1.0], &[1.0, 2.0], range()).is_err());
        assert!(compute_metrics(&[f64::NAN], &[0.0], range()).is_err());
    }

    #[test]
    fn all_zero_labels_empty_setting_b() {
        let r = compute_metrics(&[0.3, -0.3], &[0.0, 0.0], range()).unwrap();
        assert_eq!(r.n_pos, 0);
        assert_eq!(r.acc2_pos, 0.0);
        assert_eq!(r.f1_pos, 0.0);
    }

    #[test]
    fn table_renders_columns() {
        let r = compute_metrics(&[1.0, -1.0], &[1.5, -0.5], range()).unwrap();
        let t = r.table(4);
        assert!(t.contains("MAE"));
        assert!(t.contains("Acc-2"));
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
    }

    proptest! {
        /// Dropping zero-labeled samples up front must not move setting-B
        /// metrics (the filter is idempotent), and fractions stay in [0,1].
        #[test]
        fn setting_b_filter_idempotent(
            pairs in proptest::collection::vec((-3.0f64..3.0, -3i32..=3), 1..40)
        ) {
            let preds: Vec<f64> = pairs.iter().map(|&(p, _)| p).collect();
            let labels: Vec<f64> = pairs.iter().map(|&(_, l)| l as f64 / 2.0).collect();
            let r = compute_metrics(&preds, &labels, range()).unwrap();
            for frac in [r.acc7, r.acc2_nonneg, r.f1_nonneg, r.acc2_pos, r.f1_pos] {
                prop_assert!((0.0..=1.0).contains(&frac));
            }
            prop_assert!(r.n_pos <= r.n_nonneg);

            let filtered: Vec<(f64, f64)> = preds.iter().zip(&labels)
                .filter(|(_, &l)| l != 0.0)
                .map(|(&p, &l)| (p, l))
                .collect();
            if !filtered.is_empty() {
                let fp: Vec<f64> = filtered.iter().map(|&(p, _)| p).collect();
                let fl: Vec<f64> = filtered.iter().map(|&(_, l)| l).collect();
                let rf = compute_metrics(&fp, &fl, range()).unwrap();
                prop_assert_eq!(r.acc2_pos, rf.acc2_pos);
                prop_assert_eq!(r.f1_pos, rf.f1_pos);
                prop_assert_eq!(r.n_pos, rf.n_pos);
            }
        }

        /// MAE is zero only for identical inputs; Acc-7 is invariant to
        /// moving a prediction anywhere inside its rounding cell.
        #[test]
        fn mae_and_acc7_properties(labels in proptest::collection::vec(-2.9f64..2.9, 1..20)) {
            let r = compute_metrics(&labels, &labels, range()).unwrap();
            prop_assert_eq!(r.mae, 0.0);
            prop_assert_eq!(r.acc7, 1.0);
            for delta in [0.4, -0.4] {
                let nudged: Vec<f64> = labels.iter().map(|&l| l.round() + delta).collect();
                let rn = compute_metrics(&nudged, &labels, range()).unwrap();
                prop_assert_eq!(rn.acc7, 1.0);
            }
        }
    }
}
