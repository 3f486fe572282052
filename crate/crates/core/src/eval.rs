//! Binary matching metrics: precision, recall, F1, accuracy, Spearman rank
//! correlation, and decision-threshold selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::PairExample;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    /// Counts for `score >= threshold` decisions.
    pub fn from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut c = Self::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Metrics whose denominator was zero are reported as 0 and flagged here.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UndefinedFlags {
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub undefined: UndefinedFlags,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn confusion_metrics(c: &ConfusionCounts) -> Result<ConfusionMetrics> {
    if c.total() == 0 {
        return Err(Error::Empty("confusion counts"));
    }
    let (precision, p_undef) = ratio(c.tp, c.tp + c.fp);
    let (recall, r_undef) = ratio(c.tp, c.tp + c.fn_);
    let (f1, f_undef) = if precision + recall == 0.0 {
        (0.0, true)
    } else {
        (2.0 * precision * recall / (precision + recall), false)
    };
    let accuracy = (c.tp + c.tn) as f64 / c.total() as f64;
    Ok(ConfusionMetrics {
        precision,
        recall,
        f1,
        accuracy,
        undefined: UndefinedFlags {
            precision: p_undef,
            recall: r_undef,
            f1: f_undef,
        },
    })
}

/// 1-based ranks, ties sharing the average of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument(
            "correlation undefined for a constant sequence".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of average ranks. Without
/// ties this equals `1 - 6 Σ d² / (n (n² - 1))`.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs at least 2 points".into()));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Threshold maximizing F1 over midpoints between adjacent distinct scores
/// (ties go to the lower threshold). Decisions are `score >= threshold`.
/// With a single distinct score the only candidate is that score.
pub fn best_threshold(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l == 1).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::InvalidArgument(
            "best_threshold needs at least one positive and one negative label".into(),
        ));
    }
    let mut pts: Vec<(f64, u8)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));

    let f1 = |tp: u64, fp: u64| {
        let fn_ = positives - tp;
        if tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        }
    };
    if pts[0].0 == pts[pts.len() - 1].0 {
        return Ok((pts[0].0, f1(positives, negatives)));
    }

    // Sweep upward: everything at or below the current distinct value becomes
    // negative, everything above it stays positive.
    let (mut tp, mut fp) = (positives, negatives);
    let mut best: Option<(f64, f64)> = None;
    let mut i = 0;
    while i < pts.len() {
        let v = pts[i].0;
        while i < pts.len() && pts[i].0 == v {
            if pts[i].1 == 1 {
                tp -= 1;
            } else {
                fp -= 1;
            }
            i += 1;
        }
        if i == pts.len() {
            break;
        }
        let t = v + (pts[i].0 - v) / 2.0;
        let score = f1(tp, fp);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((t, score));
        }
    }
    Ok(best.expect("at least two distinct scores"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThresholdPolicy {
    Fixed { threshold: f64 },
    /// Pick the F1-maximizing threshold on the evaluated scores.
    BestF1,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        Self::Fixed { threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// `None` when either sequence is constant.
    pub spearman: Option<f64>,
    pub counts: ConfusionCounts,
    pub undefined: UndefinedFlags,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Scores a sentence pair; larger means more similar.
pub trait PairScorer {
    fn score(&self, text_a: &str, text_b: &str) -> Result<f64>;
}

pub fn evaluate_scores(scores: Vec<f64>, labels: Vec<u8>, policy: ThresholdPolicy) -> Result<EvalReport> {
    if scores.is_empty() {
        return Err(Error::Empty("evaluation pairs"));
    }
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let threshold = match policy {
        ThresholdPolicy::Fixed { threshold } => threshold,
        ThresholdPolicy::BestF1 => best_threshold(&scores, &labels)?.0,
    };
    let counts = ConfusionCounts::from_scores(&scores, &labels, threshold);
    let m = confusion_metrics(&counts)?;
    let label_f: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let spearman = if scores.len() >= 2 {
        spearman(&scores, &label_f).ok()
    } else {
        None
    };
    Ok(EvalReport {
        n: scores.len(),
        threshold,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        accuracy: m.accuracy,
        spearman,
        counts,
        undefined: m.undefined,
        scores,
        labels,
    })
}

pub fn evaluate_pairs<S: PairScorer + ?Sized>(
    model: &S,
    pairs: &[PairExample],
    policy: ThresholdPolicy,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation pairs"));
    }
    let scores = pairs
        .iter()
        .map(|p| model.score(&p.text_a, &p.text_b))
        .collect::<Result<Vec<_>>>()?;
    evaluate_scores(scores, pairs.iter().map(|p| p.label).collect(), policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn confusion_hand_values() {
        let m = confusion_metrics(&ConfusionCounts { tp: 2, fp: 1, fn_: 1, tn: 2 }).unwrap();
        for v in [m.precision, m.recall, m.f1, m.accuracy] {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
        let m = confusion_metrics(&ConfusionCounts { tp: 5, fp: 0, fn_: 0, tn: 7 }).unwrap();
        assert_eq!([m.precision, m.recall, m.f1, m.accuracy], [1.0; 4]);
    }

    #[test]
    fn zero_denominators_are_flagged() {
        let m = confusion_metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 3, tn: 3 }).unwrap();
        assert_eq!(m.precision, 0.0);
        assert!(m.undefined.precision && m.undefined.f1 && !m.undefined.recall);
        assert!(confusion_metrics(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn spearman_examples() {
        let xs = [0.3, 1.7, -2.0, 9.0, 4.4];
        assert_eq!(spearman(&xs, &xs).unwrap(), 1.0);
        let rev: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert_eq!(spearman(&xs, &rev).unwrap(), -1.0);
        // Σd² = 2, ρ = 1 - 6·2 / (3·8) = 0.5
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap(), 0.5);
        assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn best_threshold_separated() {
        let scores = [0.1, 0.2, 0.3, 0.8, 0.9];
        let labels = [0, 0, 0, 1, 1];
        let (t, f1) = best_threshold(&scores, &labels).unwrap();
        assert_eq!(f1, 1.0);
        assert!((t - 0.55).abs() < 1e-12);
    }

    #[test]
    fn best_threshold_constant_scores() {
        let (t, f1) = best_threshold(&[0.4; 4], &[1, 0, 1, 0]).unwrap();
        assert_eq!(t, 0.4);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(best_threshold(&[0.4; 4], &[1, 0, 1, 0]).unwrap(), (t, f1));
    }

    #[test]
    fn best_threshold_needs_both_labels() {
        assert!(best_threshold(&[0.1, 0.2], &[1, 1]).is_err());
    }

    struct LabelOracle(HashMap<(String, String), u8>);

    impl PairScorer for LabelOracle {
        fn score(&self, a: &str, b: &str) -> Result<f64> {
            Ok(self.0[&(a.to_string(), b.to_string())] as f64)
        }
    }

    struct AlwaysNo;

    impl PairScorer for AlwaysNo {
        fn score(&self, _: &str, _: &str) -> Result<f64> {
            Ok(0.0)
        }
    }

    fn balanced() -> Vec<PairExample> {
        (0..10)
            .map(|i| PairExample::new(format!("a{i}"), format!("b{i}"), (i % 2) as u8).unwrap())
            .collect()
    }

    #[test]
    fn oracle_model_is_perfect() {
        let pairs = balanced();
        let oracle = LabelOracle(
            pairs
                .iter()
                .map(|p| ((p.text_a.clone(), p.text_b.clone()), p.label))
                .collect(),
        );
        let r = evaluate_pairs(&oracle, &pairs, ThresholdPolicy::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.spearman, Some(1.0));
    }

    #[test]
    fn all_negative_decisions_on_balanced_labels() {
        let r = evaluate_pairs(&AlwaysNo, &balanced(), ThresholdPolicy::default()).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert!(r.undefined.precision);
        assert_eq!(r.spearman, None);
    }

    #[test]
    fn report_is_self_consistent() {
        let scores = vec![0.9, 0.4, 0.6, 0.2, 0.55, 0.45];
        let labels = vec![1, 1, 0, 0, 1, 0];
        let r = evaluate_scores(scores, labels, ThresholdPolicy::BestF1).unwrap();
        let again = evaluate_scores(
            r.scores.clone(),
            r.labels.clone(),
            ThresholdPolicy::Fixed { threshold: r.threshold },
        )
        .unwrap();
        assert_eq!(r, again);
        let m = confusion_metrics(&r.counts).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (r.precision, r.recall, r.f1, r.accuracy));
    }
}
