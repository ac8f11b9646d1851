//! Classification metrics: confusion matrices, accuracy, macro one-vs-rest
//! rates, Cohen's kappa, and macro precision-recall AUC.
//!
//! Every matrix-derived metric is a pure function of the confusion matrix
//! (fixed iteration order, no data-dependent reordering), so a report can be
//! re-derived exactly — bit for bit — from its own emitted matrix. Only
//! `pr_auc` needs the underlying scores and is therefore optional.
//!
//! Macro averages run over classes that actually occur in the evaluation set
//! (nonzero row sum); a class absent from the data contributes no evidence.
//! Per-class ratios with an empty denominator (e.g. precision of a class
//! never predicted) count as 0.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat metric report plus the confusion matrix it derives from.
///
/// `sensitivity`/`recall` coincide by construction (macro one-vs-rest), as do
/// `f1`/`macro_f1`; both spellings are kept because different tasks
/// conventionally report different subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub macro_f1: f64,
    pub kappa: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Macro PR-AUC; `None` when no per-class scores were available.
    pub pr_auc: Option<f64>,
    /// `confusion_matrix[i][j]` counts pairs of true class `i` predicted `j`.
    pub confusion_matrix: Vec<Vec<u64>>,
}

/// Tallies predictions into an `n_classes × n_classes` matrix, rejecting
/// out-of-range labels or predictions.
pub fn confusion_matrix(
    labels: &[usize],
    predictions: &[usize],
    n_classes: usize,
) -> Result<Vec<Vec<u64>>> {
    if labels.len() != predictions.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels vs {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Config("nothing to score: no predictions".into()));
    }
    if n_classes == 0 {
        return Err(Error::Config("n_classes must be at least 1".into()));
    }
    let mut matrix = vec![vec![0u64; n_classes]; n_classes];
    for (&y, &p) in labels.iter().zip(predictions) {
        for v in [y, p] {
            if v >= n_classes {
                return Err(Error::LabelOutOfRange {
                    label: v as i64,
                    n_classes,
                });
            }
        }
        matrix[y][p] += 1;
    }
    Ok(matrix)
}

impl EvalReport {
    /// Derives every matrix-based metric from a confusion matrix. `pr_auc`
    /// is left empty (it needs scores, not counts).
    pub fn from_confusion(matrix: &[Vec<u64>]) -> Result<EvalReport> {
        let n = matrix.len();
        if n == 0 || matrix.iter().any(|row| row.len() != n) {
            return Err(Error::ShapeMismatch(format!(
                "confusion matrix must be square and non-empty, got {} rows",
                n
            )));
        }
        let total: u64 = matrix.iter().flatten().sum();
        if total == 0 {
            return Err(Error::Config("confusion matrix counts nothing".into()));
        }
        let trace: u64 = (0..n).map(|k| matrix[k][k]).sum();
        let row_sums: Vec<u64> = matrix.iter().map(|r| r.iter().sum()).collect();
        let col_sums: Vec<u64> = (0..n)
            .map(|j| matrix.iter().map(|r| r[j]).sum())
            .collect();

        let accuracy = trace as f64 / total as f64;

        let mut sens_sum = 0.0;
        let mut spec_sum = 0.0;
        let mut spec_n = 0usize;
        let mut prec_sum = 0.0;
        let mut f1_sum = 0.0;
        let mut present = 0usize;
        for k in 0..n {
            if row_sums[k] == 0 {
                continue;
            }
            present += 1;
            let tp = matrix[k][k] as f64;
            let fn_ = (row_sums[k] - matrix[k][k]) as f64;
            let fp = (col_sums[k] - matrix[k][k]) as f64;
            let tn = (total - row_sums[k] - col_sums[k] + matrix[k][k]) as f64;
            let sens = tp / (tp + fn_);
            let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            sens_sum += sens;
            prec_sum += prec;
            f1_sum += if prec + sens > 0.0 {
                2.0 * prec * sens / (prec + sens)
            } else {
                0.0
            };
            if tn + fp > 0.0 {
                spec_sum += tn / (tn + fp);
                spec_n += 1;
            }
        }
        if present == 0 {
            return Err(Error::Config(
                "confusion matrix has no populated classes".into(),
            ));
        }
        let sensitivity = sens_sum / present as f64;
        let precision = prec_sum / present as f64;
        let macro_f1 = f1_sum / present as f64;
        let specificity = if spec_n > 0 {
            spec_sum / spec_n as f64
        } else {
            0.0
        };

        // Cohen's kappa with the degenerate-chance convention: when expected
        // agreement is 1 (one class monopolizes rows and columns), kappa is 1
        // for perfect observed agreement and 0 otherwise.
        let p_o = accuracy;
        let p_e = (0..n)
            .map(|k| row_sums[k] as f64 * col_sums[k] as f64)
            .sum::<f64>()
            / (total as f64 * total as f64);
        let kappa = if (1.0 - p_e).abs() < 1e-15 {
            if (1.0 - p_o).abs() < 1e-15 {
                1.0
            } else {
                0.0
            }
        } else {
            (p_o - p_e) / (1.0 - p_e)
        };

        Ok(EvalReport {
            accuracy,
            sensitivity,
            specificity,
            macro_f1,
            kappa,
            precision,
            recall: sensitivity,
            f1: macro_f1,
            pr_auc: None,
            confusion_matrix: matrix.to_vec(),
        })
    }

    /// Builds the report straight from predictions; when per-class `scores`
    /// (`[n_samples × n_classes]`, higher = more confident) are given, the
    /// macro PR-AUC is filled in too.
    pub fn from_predictions(
        labels: &[usize],
        predictions: &[usize],
        scores: Option<ArrayView2<'_, f64>>,
        n_classes: usize,
    ) -> Result<EvalReport> {
        let matrix = confusion_matrix(labels, predictions, n_classes)?;
        let mut report = EvalReport::from_confusion(&matrix)?;
        if let Some(scores) = scores {
            report.pr_auc = Some(macro_pr_auc(labels, scores)?);
        }
        Ok(report)
    }
}

/// Macro-averaged area under the precision-recall curve.
///
/// Per class the samples are ranked by score (descending); tied scores form
/// one atomic group. The curve starts at (recall 0, precision 1), adds one
/// point per group, and is integrated by trapezoid over recall. Classes with
/// no positive samples are skipped.
pub fn macro_pr_auc(labels: &[usize], scores: ArrayView2<'_, f64>) -> Result<f64> {
    let (n, c) = scores.dim();
    if n != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels vs {} score rows",
            labels.len(),
            n
        )));
    }
    if n == 0 || c == 0 {
        return Err(Error::Config("nothing to score: no predictions".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::LabelOutOfRange {
            label: bad as i64,
            n_classes: c,
        });
    }
    let mut auc_sum = 0.0;
    let mut classes = 0usize;
    for k in 0..c {
        let positives = labels.iter().filter(|&&y| y == k).count();
        if positives == 0 {
            continue;
        }
        classes += 1;
        let mut ranked: Vec<(f64, bool)> = (0..n)
            .map(|i| (scores[[i, k]], labels[i] == k))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));

        let mut auc = 0.0;
        let (mut tp, mut fp) = (0u64, 0u64);
        let (mut prev_recall, mut prev_precision) = (0.0, 1.0);
        let mut i = 0;
        while i < ranked.len() {
            let mut j = i;
            while j < ranked.len() && ranked[j].0.total_cmp(&ranked[i].0).is_eq() {
                if ranked[j].1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                j += 1;
            }
            let recall = tp as f64 / positives as f64;
            let precision = tp as f64 / (tp + fp) as f64;
            auc += (recall - prev_recall) * (precision + prev_precision) / 2.0;
            prev_recall = recall;
            prev_precision = precision;
            i = j;
        }
        auc_sum += auc;
    }
    if classes == 0 {
        return Err(Error::Config(
            "precision-recall AUC needs at least one populated class".into(),
        ));
    }
    Ok(auc_sum / classes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};
    use proptest::prelude::*;

    #[test]
    fn perfect_balanced_three_class_predictions_score_ones() {
        let labels = [0, 0, 1, 1, 2, 2];
        let report =
            EvalReport::from_predictions(&labels, &labels, None, 3).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.kappa, 1.0);
        assert_eq!(report.macro_f1, 1.0);
        assert_eq!(report.sensitivity, 1.0);
        assert_eq!(report.specificity, 1.0);
        assert_eq!(report.precision, 1.0);
        assert!(report.pr_auc.is_none());
    }

    #[test]
    fn constant_predictor_on_balanced_binary_has_zero_kappa() {
        let labels = [0, 0, 1, 1];
        let preds = [0, 0, 0, 0];
        let report = EvalReport::from_predictions(&labels, &preds, None, 2).unwrap();
        assert_eq!(report.kappa, 0.0);
        assert_eq!(report.accuracy, 0.5);
    }

    #[test]
    fn hand_computed_oracle_for_a_fixed_binary_matrix() {
        // [[40, 10], [5, 45]]: worked by hand —
        //   accuracy  = 85/100
        //   p_e       = (50·45 + 50·55)/100² = 0.5 → kappa = 0.35/0.5 = 0.7
        //   sens      = (0.8 + 0.9)/2 = 0.85
        //   spec      = (45/50 + 40/50)/2 = 0.85
        //   precision = (40/45 + 45/55)/2
        //   macro F1  = (F1₀ + F1₁)/2 with F1₀ = 2·(40/45)·0.8/((40/45)+0.8)
        let matrix = vec![vec![40u64, 10], vec![5, 45]];
        let report = EvalReport::from_confusion(&matrix).unwrap();
        assert!((report.accuracy - 0.85).abs() < 1e-15);
        assert!((report.kappa - 0.7).abs() < 1e-12);
        assert!((report.sensitivity - 0.85).abs() < 1e-12);
        assert!((report.specificity - 0.85).abs() < 1e-12);
        let prec = (40.0 / 45.0 + 45.0 / 55.0) / 2.0;
        assert!((report.precision - prec).abs() < 1e-12);
        let f1_0 = 2.0 * (40.0 / 45.0) * 0.8 / (40.0 / 45.0 + 0.8);
        let f1_1 = 2.0 * (45.0 / 55.0) * 0.9 / (45.0 / 55.0 + 0.9);
        assert!((report.macro_f1 - (f1_0 + f1_1) / 2.0).abs() < 1e-12);
        assert_eq!(report.recall, report.sensitivity);
        assert_eq!(report.f1, report.macro_f1);
    }

    #[test]
    fn report_is_rederivable_from_its_own_confusion_matrix_exactly() {
        let labels = [0, 1, 2, 2, 1, 0, 2, 1, 0, 2];
        let preds = [0, 1, 1, 2, 1, 2, 2, 0, 0, 2];
        let report = EvalReport::from_predictions(&labels, &preds, None, 3).unwrap();
        let rederived = EvalReport::from_confusion(&report.confusion_matrix).unwrap();
        assert_eq!(report, rederived);
    }

    #[test]
    fn confusion_matrix_row_sums_equal_class_supports() {
        let labels = [0, 0, 0, 1, 2, 2];
        let preds = [1, 0, 2, 1, 2, 0];
        let matrix = confusion_matrix(&labels, &preds, 3).unwrap();
        let row_sums: Vec<u64> = matrix.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(row_sums, vec![3, 1, 2]);
        let total: u64 = row_sums.iter().sum();
        assert_eq!(total, labels.len() as u64);
    }

    #[test]
    fn out_of_range_labels_are_rejected_with_the_offender_named() {
        let err = confusion_matrix(&[0, 3], &[0, 1], 3).unwrap_err();
        match err {
            Error::LabelOutOfRange { label, n_classes } => {
                assert_eq!((label, n_classes), (3, 3));
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert!(confusion_matrix(&[], &[], 3).is_err());
        assert!(confusion_matrix(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn single_class_perfect_matrix_has_kappa_one() {
        // p_e = 1 edge: one class monopolizes everything.
        let report = EvalReport::from_confusion(&[vec![7u64]]).unwrap();
        assert_eq!(report.kappa, 1.0);
        assert_eq!(report.accuracy, 1.0);
    }

    #[test]
    fn degenerate_chance_with_errors_has_kappa_zero() {
        // All mass in one row but spread over columns: p_e < 1 normally; force
        // the edge with a matrix whose rows and columns both concentrate.
        let matrix = vec![vec![3u64, 0], vec![1, 0]];
        // p_o = 0.75, p_e = (4·3? ) — compute: rows (3,1), cols (4,0),
        // p_e = (3·4 + 1·0)/16 = 0.75 → kappa = 0.
        let report = EvalReport::from_confusion(&matrix).unwrap();
        assert_eq!(report.kappa, 0.0);
    }

    #[test]
    fn unpredicted_class_gets_zero_precision_not_a_crash() {
        // Class 1 occurs but is never predicted.
        let matrix = vec![vec![5u64, 0], vec![3, 0]];
        let report = EvalReport::from_confusion(&matrix).unwrap();
        assert!(report.precision < 1.0);
        assert!(report.macro_f1 < 1.0);
        assert!(report.accuracy > 0.0);
    }

    #[test]
    fn absent_classes_are_excluded_from_macro_averages() {
        // Class 2 never occurs and is never predicted; metrics should match
        // the same data scored as a 2-class problem.
        let with_ghost = vec![vec![4u64, 1, 0], vec![2, 3, 0], vec![0, 0, 0]];
        let without = vec![vec![4u64, 1], vec![2, 3]];
        let a = EvalReport::from_confusion(&with_ghost).unwrap();
        let b = EvalReport::from_confusion(&without).unwrap();
        assert_eq!(a.sensitivity, b.sensitivity);
        assert_eq!(a.precision, b.precision);
        assert_eq!(a.macro_f1, b.macro_f1);
        assert_eq!(a.accuracy, b.accuracy);
    }

    #[test]
    fn perfectly_separating_scores_have_unit_pr_auc() {
        let labels = [0, 0, 1, 1];
        let scores = arr2(&[
            [0.9, 0.1],
            [0.8, 0.2],
            [0.2, 0.8],
            [0.1, 0.9],
        ]);
        let auc = macro_pr_auc(&labels, scores.view()).unwrap();
        assert!((auc - 1.0).abs() < 1e-12, "auc {auc}");
    }

    #[test]
    fn all_tied_scores_give_the_single_trapezoid_area() {
        // One atomic group: curve goes (0,1) → (1, prevalence); trapezoid
        // area = (1 + prevalence)/2 per class.
        let labels = [0, 0, 1, 1];
        let scores = Array2::from_elem((4, 2), 0.5);
        let auc = macro_pr_auc(&labels, scores.view()).unwrap();
        assert!((auc - 0.75).abs() < 1e-12, "auc {auc}");
    }

    #[test]
    fn anti_correlated_scores_score_below_correlated_ones() {
        let labels = [0, 1, 0, 1, 0, 1];
        let good = arr2(&[
            [0.9, 0.1],
            [0.2, 0.8],
            [0.7, 0.3],
            [0.3, 0.7],
            [0.8, 0.2],
            [0.1, 0.9],
        ]);
        let bad = good.mapv(|v| 1.0 - v);
        let auc_good = macro_pr_auc(&labels, good.view()).unwrap();
        let auc_bad = macro_pr_auc(&labels, bad.view()).unwrap();
        assert!(auc_good > auc_bad, "{auc_good} vs {auc_bad}");
    }

    #[test]
    fn reports_serialize_to_flat_json_with_the_matrix_attached() {
        let labels = [0, 1, 1, 0];
        let preds = [0, 1, 0, 0];
        let scores = arr2(&[
            [0.8, 0.2],
            [0.3, 0.7],
            [0.6, 0.4],
            [0.9, 0.1],
        ]);
        let report =
            EvalReport::from_predictions(&labels, &preds, Some(scores.view()), 2).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, back);
        assert!(json.contains("\"confusion_matrix\""));
        assert!(json.contains("\"pr_auc\""));
    }

    proptest! {
        #[test]
        fn kappa_stays_in_range_and_is_one_iff_diagonal(
            cells in proptest::collection::vec(0u64..30, 9),
        ) {
            let matrix: Vec<Vec<u64>> =
                cells.chunks(3).map(|c| c.to_vec()).collect();
            let total: u64 = cells.iter().sum();
            prop_assume!(total > 0);
            let report = EvalReport::from_confusion(&matrix).unwrap();
            prop_assert!(report.kappa >= -1.0 - 1e-12);
            prop_assert!(report.kappa <= 1.0 + 1e-12);
            let diagonal_only = (0..3).all(|i| (0..3).all(|j| i == j || matrix[i][j] == 0));
            let trace: u64 = (0..3).map(|k| matrix[k][k]).sum();
            if diagonal_only && trace > 0 {
                prop_assert_eq!(report.kappa, 1.0);
            } else if report.kappa == 1.0 {
                prop_assert!(diagonal_only && trace > 0);
            }
        }

        #[test]
        fn accuracy_always_equals_trace_over_total(
            cells in proptest::collection::vec(0u64..20, 4),
        ) {
            let matrix: Vec<Vec<u64>> = cells.chunks(2).map(|c| c.to_vec()).collect();
            let total: u64 = cells.iter().sum();
            prop_assume!(total > 0);
            prop_assume!(matrix.iter().any(|r| r.iter().sum::<u64>() > 0));
            let report = EvalReport::from_confusion(&matrix).unwrap();
            let trace = (matrix[0][0] + matrix[1][1]) as f64;
            prop_assert_eq!(report.accuracy, trace / total as f64);
        }
    }
}
