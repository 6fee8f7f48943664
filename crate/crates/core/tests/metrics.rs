use adapt2::metrics::{aggregate, aggregate_reports, argmax_rows, macro_f1, ConfusionMatrix, MetricReport};
use adapt2::tensor::Tensor;
use proptest::prelude::*;

#[test]
fn balanced_two_classes_all_predicted_first_is_one_third() {
    let truth = [0, 0, 1, 1];
    let cm = ConfusionMatrix::from_predictions(&truth, &[0, 0, 0, 0], 2).unwrap();
    // Class 0: precision 1/2, recall 1 → F1 2/3. Class 1: F1 0.
    assert_eq!(macro_f1(&cm).unwrap(), (2.0 / 3.0 + 0.0) / 2.0);
    assert!((macro_f1(&cm).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(cm.accuracy(), 0.5);
}

#[test]
fn three_class_hand_example() {
    // rows = truth, columns = prediction
    let cm = ConfusionMatrix::from_rows(&[vec![3, 1, 0], vec![2, 2, 0], vec![0, 1, 1]]).unwrap();
    let f1 = |tp: f64, fp: f64, fn_: f64| 2.0 * tp / (2.0 * tp + fp + fn_);
    let expected = (f1(3.0, 2.0, 1.0) + f1(2.0, 2.0, 2.0) + f1(1.0, 0.0, 1.0)) / 3.0;
    assert!((macro_f1(&cm).unwrap() - expected).abs() < 1e-12);
    assert!((cm.accuracy() - 6.0 / 10.0).abs() < 1e-15);
}

#[test]
fn classes_absent_from_truth_are_not_averaged() {
    // Class 2 never occurs; one sample is wrongly predicted as it.
    let cm = ConfusionMatrix::from_predictions(&[0, 0, 1, 1], &[0, 2, 1, 1], 3).unwrap();
    let per = cm.per_class_f1();
    assert_eq!(per[2], None);
    let f1_0 = 2.0 * 1.0 / (2.0 * 1.0 + 0.0 + 1.0);
    let f1_1 = 1.0;
    assert!((macro_f1(&cm).unwrap() - (f1_0 + f1_1) / 2.0).abs() < 1e-15);
}

#[test]
fn empty_and_out_of_range_inputs_error() {
    assert!(macro_f1(&ConfusionMatrix::new(3)).is_err());
    assert!(ConfusionMatrix::from_predictions(&[0, 3], &[0, 1], 3).is_err());
    assert!(ConfusionMatrix::from_predictions(&[0], &[0, 1], 3).is_err());
    assert!(aggregate(&[]).is_err());
}

#[test]
fn aggregation_of_two_values() {
    let s = aggregate(&[0.4, 0.6]).unwrap();
    assert!((s.mean - 0.5).abs() < 1e-15);
    assert!((s.std.unwrap() - 0.02f64.sqrt()).abs() < 1e-12);
    assert!((s.std.unwrap() - 0.1414).abs() < 1e-4);
    assert_eq!(s.n, 2);
    assert_eq!(aggregate(&[0.7]).unwrap().std, None);
}

#[test]
fn report_aggregation_uses_both_metrics() {
    let cm_a = ConfusionMatrix::from_predictions(&[0, 1], &[0, 1], 2).unwrap();
    let cm_b = ConfusionMatrix::from_predictions(&[0, 0, 1, 1], &[0, 0, 0, 0], 2).unwrap();
    let reports = [MetricReport::from_confusion(&cm_a, 0, "h").unwrap(), MetricReport::from_confusion(&cm_b, 1, "h").unwrap()];
    let s = aggregate_reports(&reports).unwrap();
    assert!((s.macro_f1.mean - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
    assert!((s.accuracy.mean - 0.75).abs() < 1e-15);
}

#[test]
fn argmax_breaks_ties_low() {
    let t = Tensor::new(vec![3, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0, -1.0, -3.0, -1.0]).unwrap();
    assert_eq!(argmax_rows(&t), vec![0, 1, 0]);
}

proptest! {
    #[test]
    fn aggregation_matches_closed_form(values in prop::collection::vec(0.0f64..1.0, 2..30)) {
        let n = values.len() as f64;
        let sum: f64 = values.iter().sum();
        let sum_sq: f64 = values.iter().map(|v| v * v).sum();
        let mean = sum / n;
        let var = (sum_sq - n * mean * mean) / (n - 1.0);
        let s = aggregate(&values).unwrap();
        prop_assert!((s.mean - mean).abs() < 1e-12);
        prop_assert!((s.std.unwrap() - var.max(0.0).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn macro_f1_ignores_class_names(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60), shift in 1usize..4) {
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let relabel = |v: &[usize]| v.iter().map(|&c| (c + shift) % 4).collect::<Vec<_>>();
        let a = macro_f1(&ConfusionMatrix::from_predictions(&truth, &pred, 4).unwrap()).unwrap();
        let b = macro_f1(&ConfusionMatrix::from_predictions(&relabel(&truth), &relabel(&pred), 4).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn perfect_predictions_score_one(truth in prop::collection::vec(0usize..5, 1..40)) {
        let cm = ConfusionMatrix::from_predictions(&truth, &truth, 5).unwrap();
        prop_assert_eq!(macro_f1(&cm).unwrap(), 1.0);
    }
}
