use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_pairs<I>(pairs: I, positive: Label) -> Self
    where
        I: IntoIterator<Item = (Label, Label)>,
    {
        let mut c = Confusion::default();
        for (pred, truth) in pairs {
            match (pred == positive, truth == positive) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn metrics(&self) -> Metrics {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                (0.0, true)
            } else {
                (num as f64 / den as f64, false)
            }
        };
        let (accuracy, _) = ratio(self.tp + self.tn, self.total());
        let (precision, precision_undefined) = ratio(self.tp, self.tp + self.fp);
        let (recall, recall_undefined) = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        if precision_undefined {
            log::warn!("precision undefined (no positive predictions); reporting 0");
        }
        if recall_undefined {
            log::warn!("recall undefined (no positive ground truth); reporting 0");
        }
        Metrics {
            accuracy,
            precision,
            recall,
            f1,
            support_positive: self.tp + self.fn_,
            support_negative: self.fp + self.tn,
            confusion: *self,
            precision_undefined,
            recall_undefined,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support_positive: usize,
    pub support_negative: usize,
    pub confusion: Confusion,
    /// Set when the ratio had a zero denominator and was reported as 0.
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

/// Binary metrics over two id-aligned label lists.
pub fn compute_metrics(
    predictions: &[(String, Label)],
    ground_truth: &[(String, Label)],
    positive: Label,
) -> Result<Metrics> {
    let index = |items: &[(String, Label)], what: &str| -> Result<BTreeMap<String, Label>> {
        let mut m = BTreeMap::new();
        for (id, l) in items {
            if m.insert(id.clone(), *l).is_some() {
                return Err(Error::IdMismatch(format!("duplicate {what} id {id:?}")));
            }
        }
        Ok(m)
    };
    let pred = index(predictions, "prediction")?;
    let truth = index(ground_truth, "ground-truth")?;
    if pred.len() != truth.len() || pred.keys().zip(truth.keys()).any(|(a, b)| a != b) {
        let stray = pred
            .keys()
            .find(|k| !truth.contains_key(*k))
            .or_else(|| truth.keys().find(|k| !pred.contains_key(*k)))
            .cloned()
            .unwrap_or_default();
        return Err(Error::IdMismatch(format!("id {stray:?} present on one side only")));
    }
    let pairs = pred.values().copied().zip(truth.values().copied());
    Ok(Confusion::from_pairs(pairs, positive).metrics())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricSet {
    fn of(m: &Metrics) -> Self {
        Self {
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
        }
    }

    fn map(values: &[MetricSet], f: impl Fn(&[f64]) -> f64) -> Self {
        let col = |g: fn(&MetricSet) -> f64| f(&values.iter().map(g).collect::<Vec<_>>());
        Self {
            accuracy: col(|m| m.accuracy),
            precision: col(|m| m.precision),
            recall: col(|m| m.recall),
            f1: col(|m| m.f1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub folds: usize,
    pub mean: MetricSet,
    /// Sample standard deviation (n - 1 denominator).
    pub std: MetricSet,
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub(crate) fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

pub fn aggregate_cv(per_fold: &[Metrics]) -> Result<CvSummary> {
    if per_fold.len() < 2 {
        return Err(Error::TooFewFolds(per_fold.len()));
    }
    let sets: Vec<MetricSet> = per_fold.iter().map(MetricSet::of).collect();
    Ok(CvSummary {
        folds: per_fold.len(),
        mean: MetricSet::map(&sets, mean),
        std: MetricSet::map(&sets, sample_std),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{NonOffensive as N, Offensive as O};

    fn lists(pairs: &[(Label, Label)]) -> (Vec<(String, Label)>, Vec<(String, Label)>) {
        let p = pairs.iter().enumerate().map(|(i, x)| (i.to_string(), x.0)).collect();
        let t = pairs.iter().enumerate().map(|(i, x)| (i.to_string(), x.1)).collect();
        (p, t)
    }

    #[test]
    fn hand_computed_point_nine() {
        let mut pairs = vec![(O, O); 9];
        pairs.push((O, N));
        pairs.push((N, O));
        pairs.extend(vec![(N, N); 9]);
        let (p, t) = lists(&pairs);
        let m = compute_metrics(&p, &t, O).unwrap();
        assert!((m.accuracy - 0.9).abs() < 1e-12);
        assert!((m.precision - 0.9).abs() < 1e-12);
        assert!((m.recall - 0.9).abs() < 1e-12);
        assert!((m.f1 - 0.9).abs() < 1e-12);
        assert_eq!(m.support_positive, 10);
    }

    #[test]
    fn perfect_and_degenerate() {
        let (p, t) = lists(&[(O, O), (N, N), (O, O)]);
        let m = compute_metrics(&p, &t, O).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));

        let (p, t) = lists(&[(N, O), (N, N)]);
        let m = compute_metrics(&p, &t, O).unwrap();
        assert_eq!(m.precision, 0.0);
        assert!(m.precision_undefined);
        assert_eq!(m.recall, 0.0);
        assert!(!m.recall_undefined);
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn id_mismatch() {
        let p = vec![("a".to_string(), O)];
        let t = vec![("b".to_string(), O)];
        assert!(matches!(compute_metrics(&p, &t, O), Err(Error::IdMismatch(_))));
        let dup = vec![("a".to_string(), O), ("a".to_string(), N)];
        assert!(matches!(compute_metrics(&dup, &dup, O), Err(Error::IdMismatch(_))));
    }

    fn with_accuracy(a: f64) -> Metrics {
        Metrics {
            accuracy: a,
            precision: a,
            recall: a,
            f1: a,
            support_positive: 1,
            support_negative: 1,
            confusion: Confusion::default(),
            precision_undefined: false,
            recall_undefined: false,
        }
    }

    #[test]
    fn aggregate_examples() {
        let same = aggregate_cv(&[with_accuracy(0.8); 4]).unwrap();
        assert_eq!(same.std.accuracy, 0.0);
        let two = aggregate_cv(&[with_accuracy(0.9), with_accuracy(1.0)]).unwrap();
        assert!((two.mean.accuracy - 0.95).abs() < 1e-12);
        assert!((two.std.accuracy - 0.070_710_678_118_654_75).abs() < 1e-12);
        assert!(matches!(aggregate_cv(&[with_accuracy(1.0)]), Err(Error::TooFewFolds(1))));
    }
}
