//! Classification metrics over predicted and true class indices.

use serde::{Deserialize, Serialize};

use crate::config::BinarizeRule;
use crate::data::{LabelSet, Task};
use crate::model::decide;
use crate::params::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Overall fraction correct.
    pub acc: f64,
    /// Mean recall over classes present in the labels.
    pub ua: f64,
    /// Support-weighted mean of per-class F1.
    pub f1: f64,
}

/// `counts[t][p]` = number of samples of true class `t` predicted as `p`.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    assert_eq!(predictions.len(), labels.len(), "aligned predictions and labels");
    let mut counts = vec![vec![0; num_classes]; num_classes];
    for (&p, &t) in predictions.iter().zip(labels) {
        counts[t][p] += 1;
    }
    counts
}

pub fn compute_metrics(predictions: &[usize], labels: &[usize], num_classes: usize) -> Metrics {
    let n = labels.len();
    if n == 0 {
        return Metrics {
            acc: 0.0,
            ua: 0.0,
            f1: 0.0,
        };
    }
    let cm = confusion_matrix(predictions, labels, num_classes);
    let correct: usize = (0..num_classes).map(|k| cm[k][k]).sum();
    let mut recall_sum = 0.0;
    let mut present = 0usize;
    let mut f1_sum = 0.0;
    for k in 0..num_classes {
        let support: usize = cm[k].iter().sum();
        let predicted: usize = (0..num_classes).map(|t| cm[t][k]).sum();
        if support == 0 {
            log::debug!("class {k} absent from labels, left out of UA");
            continue;
        }
        present += 1;
        let tp = cm[k][k] as f64;
        let recall = tp / support as f64;
        recall_sum += recall;
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        f1_sum += f1 * support as f64;
    }
    Metrics {
        acc: correct as f64 / n as f64,
        ua: recall_sum / present as f64,
        f1: f1_sum / n as f64,
    }
}

/// Class indices for `labels`, binarising regression scores with `rule`.
pub fn label_classes(labels: &LabelSet, rule: BinarizeRule) -> (Vec<usize>, usize) {
    match labels {
        LabelSet::Classification { y, num_classes } => (y.clone(), *num_classes),
        LabelSet::Regression { y } => (y.iter().map(|&s| rule.apply(s)).collect(), 2),
    }
}

/// Metrics of raw head outputs against labels.
pub fn output_metrics(outputs: &Mat, labels: &LabelSet, rule: BinarizeRule) -> Metrics {
    let task = labels.task();
    let preds = decide(outputs, task, rule);
    let (truth, k) = label_classes(labels, rule);
    compute_metrics(&preds, &truth, k)
}

pub fn output_accuracy(outputs: &Mat, labels: &LabelSet, rule: BinarizeRule) -> f64 {
    output_metrics(outputs, labels, rule).acc
}

/// Which secondary metric a table shows next to ACC.
pub fn secondary_name(task: Task) -> &'static str {
    match task {
        Task::Classification => "UA",
        Task::Regression => "F1",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_example() {
        // confusion [[1,1],[0,2]]
        let m = compute_metrics(&[0, 1, 1, 1], &[0, 0, 1, 1], 2);
        assert_eq!(m.acc, 0.75);
        assert_eq!(m.ua, 0.75);
    }

    #[test]
    fn perfect() {
        let m = compute_metrics(&[0, 1, 2, 2], &[0, 1, 2, 2], 3);
        assert_eq!((m.acc, m.ua, m.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn absent_class_left_out_of_ua() {
        let m = compute_metrics(&[0, 1], &[0, 0], 3);
        assert_eq!(m.ua, 0.5);
    }

    #[test]
    fn regression_binarised() {
        let labels = LabelSet::Regression {
            y: vec![-1.0, 0.0, 2.0, -0.2],
        };
        let out = ndarray::array![[-0.5], [0.3], [1.0], [0.1]];
        let m = output_metrics(&out, &labels, BinarizeRule::NegNonneg);
        assert_eq!(m.acc, 0.75);
    }
}
