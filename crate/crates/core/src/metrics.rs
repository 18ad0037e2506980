//! Evaluation metrics: macro-averaged F-score, quadratic weighted kappa,
//! and the two-stage aggregation into mF / mQWK (scores averaged within a
//! task across datasets first, then across tasks).

use serde::{Deserialize, Serialize};

use crate::labels::{PartialLabels, UNKNOWN};
use crate::tensor::Tensor;

/// Decision threshold applied to probabilities.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// Binary confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_preds(preds: &[u8], labels: &[u8]) -> Self {
        let mut c = ConfusionCounts::default();
        for (&p, &l) in preds.iter().zip(labels) {
            match (p, l) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 0) => c.tn += 1,
                (0, 1) => c.fn_ += 1,
                _ => {}
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Mean of the positive-class and negative-class F1 scores; an F1 with a
/// zero denominator counts as 0.
pub fn macro_f(preds: &[u8], labels: &[u8]) -> f64 {
    assert_eq!(preds.len(), labels.len());
    assert!(!preds.is_empty(), "macro_f needs at least one sample");
    let c = ConfusionCounts::from_preds(preds, labels);
    let f_pos = f1(c.tp, c.fp, c.fn_);
    let f_neg = f1(c.tn, c.fn_, c.fp);
    0.5 * (f_pos + f_neg)
}

/// Positive-class F1 alone, for callers that want the single-class variant.
pub fn positive_f(preds: &[u8], labels: &[u8]) -> f64 {
    let c = ConfusionCounts::from_preds(preds, labels);
    f1(c.tp, c.fp, c.fn_)
}

/// Quadratic weighted kappa over ordinal levels `0..num_levels`.
///
/// 1 - (sum w O) / (sum w E) with w_ij = (i-j)^2 / (L-1)^2; returns 0 when
/// the expected-disagreement denominator vanishes (constant marginals).
pub fn qwk(preds: &[usize], labels: &[usize], num_levels: usize) -> f64 {
    assert_eq!(preds.len(), labels.len());
    assert!(!preds.is_empty(), "qwk needs at least one sample");
    if num_levels < 2 {
        return 0.0;
    }
    let l = num_levels;
    let n = preds.len() as f64;
    let mut observed = vec![0.0f64; l * l];
    let mut row = vec![0.0f64; l];
    let mut col = vec![0.0f64; l];
    for (&p, &y) in preds.iter().zip(labels) {
        assert!(p < l && y < l, "value outside 0..{l}");
        observed[p * l + y] += 1.0;
        row[p] += 1.0;
        col[y] += 1.0;
    }
    let wf = |i: usize, j: usize| {
        let d = i as f64 - j as f64;
        d * d / ((l - 1) as f64 * (l - 1) as f64)
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..l {
        for j in 0..l {
            num += wf(i, j) * observed[i * l + j];
            den += wf(i, j) * row[i] * col[j] / n;
        }
    }
    if den == 0.0 {
        0.0
    } else {
        1.0 - num / den
    }
}

/// One score attached to a (task, dataset) cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskScore {
    pub task: usize,
    pub dataset: usize,
    pub value: f64,
}

/// Average scores within each task across datasets, then across tasks.
pub fn aggregate(scores: &[TaskScore]) -> f64 {
    assert!(!scores.is_empty(), "aggregate needs at least one score");
    let max_task = scores.iter().map(|s| s.task).max().expect("non-empty");
    let mut per_task = Vec::new();
    for t in 0..=max_task {
        let vals: Vec<f64> = scores.iter().filter(|s| s.task == t).map(|s| s.value).collect();
        if !vals.is_empty() {
            per_task.push(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    per_task.iter().sum::<f64>() / per_task.len() as f64
}

/// Per-task metrics on one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: usize,
    pub f_score: f64,
    pub qwk: f64,
    pub samples: usize,
}

/// Metrics of every labelled task of one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub name: String,
    pub tasks: Vec<TaskMetrics>,
}

/// Full evaluation report: per-dataset breakdown plus mF / mQWK.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub datasets: Vec<DatasetMetrics>,
    pub m_f: f64,
    pub m_qwk: f64,
}

/// Score one dataset: probabilities `[N, T]` against partial labels,
/// thresholded at 0.5; unknown entries are skipped per task.
pub fn evaluate_dataset(name: &str, probs: &Tensor, labels: &PartialLabels) -> DatasetMetrics {
    let t = labels.tasks();
    let n = labels.batch();
    assert_eq!(probs.shape(), &[n, t], "probs shape vs labels");
    let mut tasks = Vec::new();
    for ti in 0..t {
        let mut preds = Vec::new();
        let mut truth = Vec::new();
        for bi in 0..n {
            let y = labels.get(bi, ti);
            if y == UNKNOWN {
                continue;
            }
            let p = probs.data()[bi * t + ti];
            preds.push(if p > DECISION_THRESHOLD { 1u8 } else { 0u8 });
            truth.push(y as u8);
        }
        if truth.is_empty() {
            continue;
        }
        let pv: Vec<usize> = preds.iter().map(|&v| v as usize).collect();
        let tv: Vec<usize> = truth.iter().map(|&v| v as usize).collect();
        tasks.push(TaskMetrics {
            task: ti,
            f_score: macro_f(&preds, &truth),
            qwk: qwk(&pv, &tv, 2),
            samples: truth.len(),
        });
    }
    DatasetMetrics {
        name: name.to_string(),
        tasks,
    }
}

/// Combine per-dataset evaluations into the final report.
pub fn combine(datasets: Vec<DatasetMetrics>) -> MetricsReport {
    let mut f_scores = Vec::new();
    let mut qwks = Vec::new();
    for (di, d) in datasets.iter().enumerate() {
        for tm in &d.tasks {
            f_scores.push(TaskScore {
                task: tm.task,
                dataset: di,
                value: tm.f_score,
            });
            qwks.push(TaskScore {
                task: tm.task,
                dataset: di,
                value: tm.qwk,
            });
        }
    }
    let m_f = if f_scores.is_empty() { 0.0 } else { aggregate(&f_scores) };
    let m_qwk = if qwks.is_empty() { 0.0 } else { aggregate(&qwks) };
    MetricsReport {
        datasets,
        m_f,
        m_qwk,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one() {
        let preds = [1, 0, 1, 0];
        let labels = [1, 0, 1, 0];
        assert_eq!(macro_f(&preds, &labels), 1.0);
        let p: Vec<usize> = preds.iter().map(|&v| v as usize).collect();
        let l: Vec<usize> = labels.iter().map(|&v| v as usize).collect();
        assert_eq!(qwk(&p, &l, 2), 1.0);
    }

    #[test]
    fn all_positive_on_balanced_labels() {
        // F1+ = 2/3, F1- = 0 -> macro 1/3
        let preds = [1, 1, 1, 1];
        let labels = [1, 0, 1, 0];
        assert!((macro_f(&preds, &labels) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn anti_agreement_binary_is_minus_one() {
        let preds = [1usize, 0, 1, 0];
        let labels = [0usize, 1, 0, 1];
        assert_eq!(qwk(&preds, &labels, 2), -1.0);
    }

    #[test]
    fn constant_predictions_degenerate_to_zero() {
        let preds = [1usize, 1, 1];
        let labels = [1usize, 1, 1];
        assert_eq!(qwk(&preds, &labels, 2), 0.0);
    }

    #[test]
    fn qwk_symmetric_and_self_agreement() {
        let a = [0usize, 1, 2, 3, 1, 0, 2];
        let b = [1usize, 1, 2, 0, 3, 0, 2];
        assert!((qwk(&a, &b, 4) - qwk(&b, &a, 4)).abs() < 1e-15);
        assert_eq!(qwk(&a, &a, 4), 1.0);
    }

    #[test]
    fn aggregation_averages_within_task_first() {
        // Two datasets score the same task; a third dataset scores another.
        let scores = [
            TaskScore { task: 0, dataset: 0, value: 75.7 },
            TaskScore { task: 0, dataset: 1, value: 89.5 },
            TaskScore { task: 1, dataset: 2, value: 50.0 },
        ];
        let task0 = (75.7 + 89.5) / 2.0;
        assert!((aggregate(&scores) - (task0 + 50.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn glaucoma_style_average() {
        let scores = [
            TaskScore { task: 0, dataset: 0, value: 75.7 },
            TaskScore { task: 0, dataset: 1, value: 89.5 },
        ];
        let avg = aggregate(&scores);
        assert_eq!(format!("{avg:.1}"), "82.6");
        assert!((avg - 82.6).abs() < 1e-12);
    }

    #[test]
    fn single_cell_aggregation_is_identity() {
        let scores = [TaskScore { task: 3, dataset: 0, value: 0.42 }];
        assert_eq!(aggregate(&scores), 0.42);
    }

    #[test]
    fn equal_scores_aggregate_to_that_score() {
        let scores: Vec<TaskScore> = (0..3)
            .flat_map(|t| {
                (0..2).map(move |d| TaskScore { task: t, dataset: d, value: 0.77 })
            })
            .collect();
        assert!((aggregate(&scores) - 0.77).abs() < 1e-15);
    }

    #[test]
    fn permutation_invariance() {
        let preds = [1u8, 0, 1, 1, 0, 0, 1];
        let labels = [1u8, 1, 0, 1, 0, 1, 1];
        let perm = [4usize, 2, 0, 6, 1, 5, 3];
        let pp: Vec<u8> = perm.iter().map(|&i| preds[i]).collect();
        let pl: Vec<u8> = perm.iter().map(|&i| labels[i]).collect();
        assert_eq!(macro_f(&preds, &labels), macro_f(&pp, &pl));
    }

    #[test]
    fn evaluate_dataset_skips_unknowns() {
        let probs = Tensor::new(vec![2, 2], vec![0.9, 0.2, 0.4, 0.8]).unwrap();
        let labels = PartialLabels::from_rows(&[&[1, -1], &[0, -1]]).unwrap();
        let m = evaluate_dataset("d", &probs, &labels);
        assert_eq!(m.tasks.len(), 1);
        assert_eq!(m.tasks[0].task, 0);
        assert_eq!(m.tasks[0].samples, 2);
        assert_eq!(m.tasks[0].f_score, 1.0);
    }
}
