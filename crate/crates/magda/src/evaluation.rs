//! Micro/macro F1, precision, recall for multi-label runs and tail-class
//! accuracy for single-label runs, plus report emission.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::PatientResult;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("patient {0} has no ground truth for any evaluated label")]
    MissingGroundTruth(String),
    #[error("patient {0} has no single-label choice")]
    NotSingleLabel(String),
    #[error("no patient with a tail-class ground truth label")]
    EmptyTailSet,
    #[error("patient {patient} truth is not single-label ({positives} positives)")]
    NotSingleLabelTruth { patient: String, positives: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub per_label: BTreeMap<String, LabelCounts>,
}

/// Count confusion cells per label. Unlabeled (empty) ground-truth cells are
/// excluded pairwise: that (patient, label) pair contributes to no count.
pub fn confusion_counts(
    results: &[PatientResult],
    labels: &[String],
) -> Result<ConfusionCounts, EvalError> {
    let mut per_label: BTreeMap<String, LabelCounts> = labels
        .iter()
        .map(|l| (l.clone(), LabelCounts::default()))
        .collect();
    for result in results {
        if labels
            .iter()
            .all(|l| result.true_labels.get(l).copied().flatten().is_none())
        {
            return Err(EvalError::MissingGroundTruth(result.patient_id.clone()));
        }
        for label in labels {
            let Some(truth) = result.true_labels.get(label).copied().flatten() else {
                continue;
            };
            let predicted = result
                .final_prediction
                .labels
                .get(label)
                .copied()
                .unwrap_or(false);
            let counts = per_label.get_mut(label).expect("initialized above");
            match (truth, predicted) {
                (true, true) => counts.tp += 1,
                (false, true) => counts.fp += 1,
                (true, false) => counts.fn_ += 1,
                (false, false) => counts.tn += 1,
            }
        }
    }
    Ok(ConfusionCounts { per_label })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PrfTriple {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn prf(tp: u64, fp: u64, fn_: u64) -> PrfTriple {
    // 0/0 -> 0 convention on empty denominators.
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PrfTriple {
        precision,
        recall,
        f1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub micro: PrfTriple,
    pub macro_: PrfTriple,
    pub per_label: BTreeMap<String, PrfTriple>,
    pub tail_accuracy: Option<f64>,
    pub n_patients: usize,
    pub config_fingerprint: String,
}

/// Micro metrics over globally summed counts; macro as the unweighted mean of
/// per-label metrics.
pub fn micro_macro_metrics(counts: &ConfusionCounts) -> (PrfTriple, PrfTriple, BTreeMap<String, PrfTriple>) {
    let per_label: BTreeMap<String, PrfTriple> = counts
        .per_label
        .iter()
        .map(|(label, c)| (label.clone(), prf(c.tp, c.fp, c.fn_)))
        .collect();

    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for c in counts.per_label.values() {
        tp += c.tp;
        fp += c.fp;
        fn_ += c.fn_;
    }
    let micro = prf(tp, fp, fn_);

    let n = per_label.len().max(1) as f64;
    let macro_ = PrfTriple {
        precision: per_label.values().map(|t| t.precision).sum::<f64>() / n,
        recall: per_label.values().map(|t| t.recall).sum::<f64>() / n,
        f1: per_label.values().map(|t| t.f1).sum::<f64>() / n,
    };
    (micro, macro_, per_label)
}

pub fn build_report(
    results: &[PatientResult],
    labels: &[String],
    tail_labels: &[String],
    config_fingerprint: &str,
) -> Result<MetricReport, EvalError> {
    let counts = confusion_counts(results, labels)?;
    let (micro, macro_, per_label) = micro_macro_metrics(&counts);
    let tail = if tail_labels.is_empty() {
        None
    } else {
        Some(tail_accuracy(results, tail_labels)?)
    };
    Ok(MetricReport {
        schema_version: 1,
        micro,
        macro_,
        per_label,
        tail_accuracy: tail,
        n_patients: results.len(),
        config_fingerprint: config_fingerprint.to_string(),
    })
}

/// Fraction of patients whose true label is a tail class and whose
/// single-label choice is exactly that label.
pub fn tail_accuracy(
    results: &[PatientResult],
    tail_labels: &[String],
) -> Result<f64, EvalError> {
    let tails: BTreeSet<&str> = tail_labels.iter().map(String::as_str).collect();
    let mut total = 0u64;
    let mut correct = 0u64;
    for result in results {
        let choice = result
            .final_prediction
            .single_label_choice
            .as_deref()
            .ok_or_else(|| EvalError::NotSingleLabel(result.patient_id.clone()))?;
        let positives: Vec<&str> = result
            .true_labels
            .iter()
            .filter(|(_, v)| **v == Some(true))
            .map(|(l, _)| l.as_str())
            .collect();
        if positives.len() != 1 {
            return Err(EvalError::NotSingleLabelTruth {
                patient: result.patient_id.clone(),
                positives: positives.len(),
            });
        }
        let truth = positives[0];
        if tails.contains(truth) {
            total += 1;
            if choice.eq_ignore_ascii_case(truth) {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Err(EvalError::EmptyTailSet);
    }
    Ok(correct as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    TextTable,
    Json,
}

pub fn emit_report(report: &MetricReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            serde_json::to_string_pretty(report).expect("report serializes") + "\n"
        }
        ReportFormat::TextTable => {
            let mut out = String::new();
            out.push_str(&format!(
                "{:<12} {:>8} {:>8}\n",
                "", "micro", "macro"
            ));
            for (name, micro, macro_) in [
                ("F1-score", report.micro.f1, report.macro_.f1),
                ("Precision", report.micro.precision, report.macro_.precision),
                ("Recall", report.micro.recall, report.macro_.recall),
            ] {
                out.push_str(&format!("{name:<12} {micro:>8.4} {macro_:>8.4}\n"));
            }
            if let Some(tail) = report.tail_accuracy {
                out.push_str(&format!("{:<12} {tail:>8.4}\n", "Tail acc."));
            }
            out.push_str(&format!("n_patients   {:>8}\n", report.n_patients));
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::test_support::result_with;

    fn labels() -> Vec<String> {
        vec!["A".into(), "B".into()]
    }

    // Hand-computed example: truth s1={A}, s2={A,B}; predictions s1={A,B}, s2={A}.
    fn two_sample() -> Vec<PatientResult> {
        vec![
            result_with("s1", &[("A", Some(true)), ("B", Some(false))], &[("A", true), ("B", true)]),
            result_with("s2", &[("A", Some(true)), ("B", Some(true))], &[("A", true), ("B", false)]),
        ]
    }

    #[test]
    fn hand_computed_confusion_counts() {
        let counts = confusion_counts(&two_sample(), &labels()).unwrap();
        assert_eq!(
            counts.per_label["A"],
            LabelCounts { tp: 2, fp: 0, fn_: 0, tn: 0 }
        );
        assert_eq!(
            counts.per_label["B"],
            LabelCounts { tp: 0, fp: 1, fn_: 1, tn: 0 }
        );
    }

    #[test]
    fn hand_computed_micro_macro() {
        let counts = confusion_counts(&two_sample(), &labels()).unwrap();
        let (micro, macro_, per_label) = micro_macro_metrics(&counts);
        assert!((micro.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((micro.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((micro.recall - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(macro_.f1, 0.5);
        assert_eq!(per_label["A"].f1, 1.0);
        assert_eq!(per_label["B"].f1, 0.0);
    }

    #[test]
    fn perfect_predictions_give_ones_and_all_wrong_zeros() {
        let perfect = vec![result_with(
            "p",
            &[("A", Some(true)), ("B", Some(false))],
            &[("A", true), ("B", false)],
        )];
        let counts = confusion_counts(&perfect, &labels()).unwrap();
        let (micro, macro_, _) = micro_macro_metrics(&counts);
        assert_eq!((micro.f1, micro.precision, micro.recall), (1.0, 1.0, 1.0));
        // Label B has no positive examples, so 0/0 -> 0 drags the macro mean.
        assert_eq!(macro_.recall, 0.5);

        let wrong = vec![result_with(
            "p",
            &[("A", Some(true)), ("B", Some(false))],
            &[("A", false), ("B", true)],
        )];
        let counts = confusion_counts(&wrong, &labels()).unwrap();
        let (micro, macro_, _) = micro_macro_metrics(&counts);
        assert_eq!((micro.f1, macro_.f1), (0.0, 0.0));
    }

    #[test]
    fn empty_result_set_yields_zero_counts() {
        let counts = confusion_counts(&[], &labels()).unwrap();
        assert!(counts.per_label.values().all(|c| *c == LabelCounts::default()));
    }

    #[test]
    fn all_unlabeled_patient_is_an_error() {
        let r = vec![result_with("p", &[("A", None), ("B", None)], &[("A", true)])];
        assert!(matches!(
            confusion_counts(&r, &labels()),
            Err(EvalError::MissingGroundTruth(_))
        ));
    }

    fn single(id: &str, truth: &str, choice: &str) -> PatientResult {
        let mut r = result_with(
            id,
            &[("A", Some(truth == "A")), ("B", Some(truth == "B")), ("C", Some(truth == "C"))],
            &[("A", choice == "A"), ("B", choice == "B"), ("C", choice == "C")],
        );
        r.final_prediction.single_label_choice = Some(choice.to_string());
        r
    }

    #[test]
    fn tail_accuracy_all_correct() {
        let results: Vec<PatientResult> = ["A", "A", "B", "B", "C", "C"]
            .iter()
            .enumerate()
            .map(|(i, t)| single(&format!("p{i}"), t, t))
            .collect();
        let tails: Vec<String> = vec!["A".into(), "B".into(), "C".into()];
        assert_eq!(tail_accuracy(&results, &tails).unwrap(), 1.0);
    }

    #[test]
    fn tail_accuracy_one_class_missed() {
        // C entirely misclassified, A and B perfect, 2 patients each.
        let mut results = Vec::new();
        for (i, t) in ["A", "A", "B", "B"].iter().enumerate() {
            results.push(single(&format!("p{i}"), t, t));
        }
        results.push(single("p4", "C", "A"));
        results.push(single("p5", "C", "B"));
        let tails: Vec<String> = vec!["A".into(), "B".into(), "C".into()];
        let acc = tail_accuracy(&results, &tails).unwrap();
        assert!((acc - 4.0 / 6.0).abs() < 1e-4);
    }

    #[test]
    fn tail_accuracy_degenerate_cases() {
        let results = vec![single("p0", "A", "A")];
        assert!(matches!(
            tail_accuracy(&results, &["Z".to_string()]),
            Err(EvalError::EmptyTailSet)
        ));
        let mut r = single("p0", "A", "A");
        r.final_prediction.single_label_choice = None;
        assert!(matches!(
            tail_accuracy(&[r], &["A".to_string()]),
            Err(EvalError::NotSingleLabel(_))
        ));
    }

    #[test]
    fn report_round_trips_through_json() {
        let report = build_report(&two_sample(), &labels(), &[], "fp").unwrap();
        let json = emit_report(&report, ReportFormat::Json);
        let parsed: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, report);
        let table = emit_report(&report, ReportFormat::TextTable);
        assert!(table.contains("0.6667"));
        assert_eq!(table, emit_report(&report, ReportFormat::TextTable));
    }
}
