//! Binary classification metrics and their aggregation over folds and runs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Probability threshold on the positive class for ACC and F1.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// ROC AUC as the probability that a random positive outranks a random
/// negative, with half credit for ties. `None` when only one class is present.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // Walk groups of tied scores: each positive beats every lower negative
    // and ties with the negatives in its own group.
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        wins += pos as f64 * (neg_below as f64 + 0.5 * neg as f64);
        neg_below += neg;
        i = j;
    }
    Some(wins / (n_pos as f64 * n_neg as f64))
}

pub fn predict(score: f64) -> bool {
    score > DECISION_THRESHOLD
}

pub fn accuracy(scores: &[f64], labels: &[bool]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| predict(s) == l)
        .count();
    hits as f64 / scores.len() as f64
}

/// F1 of the positive class; zero when there are no true positives.
pub fn f1_score(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (predict(s), l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fne) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub auc: Option<f64>,
    pub acc: f64,
    pub f1: f64,
}

/// Metrics from positive-class probabilities and binary labels.
pub fn compute_metrics(scores: &[f64], labels: &[bool]) -> TaskMetrics {
    TaskMetrics {
        auc: roc_auc(scores, labels),
        acc: accuracy(scores, labels),
        f1: f1_score(scores, labels),
    }
}

/// One line of the metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run: usize,
    pub fold: usize,
    pub task: String,
    /// How the random node drop was resolved at evaluation time.
    pub variant: String,
    pub samples: usize,
    #[serde(flatten)]
    pub metrics: TaskMetrics,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Mean and sample standard deviation; `None` for an empty slice.
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: String,
    pub variant: String,
    pub auc: Option<MeanStd>,
    pub acc: MeanStd,
    pub f1: MeanStd,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: Vec<MetricsRecord>,
}

impl MetricsReport {
    pub fn push(&mut self, record: MetricsRecord) {
        self.records.push(record);
    }

    /// Mean ± std over every (run, fold) record, per task and variant.
    /// Folds where AUC is undefined are left out of the AUC aggregate.
    pub fn summary(&self) -> Vec<TaskSummary> {
        let mut groups: BTreeMap<(String, String), Vec<&MetricsRecord>> = BTreeMap::new();
        for r in &self.records {
            groups
                .entry((r.task.clone(), r.variant.clone()))
                .or_default()
                .push(r);
        }
        groups
            .into_iter()
            .map(|((task, variant), recs)| {
                let aucs: Vec<f64> = recs.iter().filter_map(|r| r.metrics.auc).collect();
                let accs: Vec<f64> = recs.iter().map(|r| r.metrics.acc).collect();
                let f1s: Vec<f64> = recs.iter().map(|r| r.metrics.f1).collect();
                TaskSummary {
                    task,
                    variant,
                    auc: MeanStd::of(&aucs),
                    acc: MeanStd::of(&accs).expect("non-empty group"),
                    f1: MeanStd::of(&f1s).expect("non-empty group"),
                }
            })
            .collect()
    }

    pub fn find(&self, task: &str, variant: &str) -> Option<TaskSummary> {
        self.summary()
            .into_iter()
            .find(|s| s.task == task && s.variant == variant)
    }

    /// One JSON object per line, in record order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> serde_json::Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<serde_json::Result<_>>()?;
        Ok(MetricsReport { records })
    }

    /// Human-readable table, percentages as `mean ± std`.
    pub fn table(&self) -> String {
        fn cell(m: Option<MeanStd>) -> String {
            match m {
                Some(m) => format!("{:6.2} ± {:5.2}", 100.0 * m.mean, 100.0 * m.std),
                None => format!("{:>15}", "n/a"),
            }
        }
        let mut out = format!(
            "{:<10} {:<8} {:>15} {:>15} {:>15}\n",
            "task", "variant", "AUC", "ACC", "F1"
        );
        for s in self.summary() {
            out.push_str(&format!(
                "{:<10} {:<8} {} {} {}\n",
                s.task,
                s.variant,
                cell(s.auc),
                cell(Some(s.acc)),
                cell(Some(s.f1))
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        let scores = [0.1, 0.2, 0.8, 0.9];
        let labels = [false, false, true, true];
        let m = compute_metrics(&scores, &labels);
        assert_eq!(m.auc, Some(1.0));
        assert_eq!(m.acc, 1.0);
        assert_eq!(m.f1, 1.0);
    }

    #[test]
    fn all_ties_give_half() {
        let labels = [false, true, true, false, true];
        assert_eq!(roc_auc(&[0.3; 5], &labels), Some(0.5));
    }

    #[test]
    fn single_class_has_no_auc() {
        assert_eq!(roc_auc(&[0.1, 0.7], &[true, true]), None);
        assert_eq!(compute_metrics(&[0.1, 0.7], &[false, false]).auc, None);
    }

    #[test]
    fn inverted_ranking() {
        assert_eq!(roc_auc(&[0.9, 0.1], &[false, true]), Some(0.0));
    }

    #[test]
    fn f1_counts() {
        // tp = 1, fp = 1, fn = 1
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [true, false, true, false];
        assert!((f1_score(&scores, &labels) - 0.5).abs() < 1e-15);
        assert_eq!(accuracy(&scores, &labels), 0.5);
    }

    #[test]
    fn jsonl_round_trip() {
        let mut rep = MetricsReport::default();
        rep.push(MetricsRecord {
            run: 0,
            fold: 1,
            task: "typing".into(),
            variant: "seeded".into(),
            samples: 4,
            metrics: TaskMetrics {
                auc: None,
                acc: 0.25,
                f1: 0.0,
            },
        });
        let back = MetricsReport::from_jsonl(&rep.to_jsonl()).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 1.0).abs() < 1e-15);
    }
}
