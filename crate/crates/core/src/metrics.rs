//! Binary classification metrics with glaucoma as the positive class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Class;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_inputs(scores: &[f64], labels: &[Class]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    Ok(())
}

/// Counts with a sample predicted positive iff its score is ≥ `threshold`.
pub fn confusion(scores: &[f64], labels: &[Class], threshold: f64) -> Result<ConfusionCounts> {
    check_inputs(scores, labels)?;
    let mut c = ConfusionCounts::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == Class::Glaucoma) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasicMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Metrics whose denominator was zero and were reported as 0.
    pub degenerate: Vec<String>,
}

fn ratio(num: u64, den: u64, name: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn basic_metrics(c: &ConfusionCounts) -> BasicMetrics {
    let mut degenerate = Vec::new();
    let accuracy = ratio(c.tp + c.tn, c.total(), "accuracy", &mut degenerate);
    let precision = ratio(c.tp, c.tp + c.fp, "precision", &mut degenerate);
    let recall = ratio(c.tp, c.tp + c.fn_, "recall", &mut degenerate);
    // 2·tp / (2·tp + fp + fn) is the harmonic mean of precision and recall.
    let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, "f1", &mut degenerate);
    BasicMetrics { accuracy, precision, recall, f1, degenerate }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Tie-aware ROC curve and its trapezoidal area.
///
/// One point per distinct score, thresholds decreasing, predicting positive
/// at score ≥ threshold. The first point uses a threshold one above the top
/// score, giving (0, 0). The area is accumulated in integer units so it
/// equals P(positive outscores negative) + ½·P(tie) exactly.
pub fn roc_auc(scores: &[f64], labels: &[Class]) -> Result<(f64, Vec<RocPoint>)> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == Class::Glaucoma).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("ROC-AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint { threshold: scores[order[0]] + 1.0, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut area2: u128 = 0;
    let mut k = 0;
    while k < order.len() {
        let t = scores[order[k]];
        let (tp0, fp0) = (tp, fp);
        while k < order.len() && scores[order[k]] == t {
            if labels[order[k]] == Class::Glaucoma {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        area2 += u128::from(fp - fp0) * u128::from(tp + tp0);
        points.push(RocPoint { threshold: t, fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64 });
    }
    let auc = area2 as f64 / (2 * u128::from(pos) * u128::from(neg)) as f64;
    Ok((auc, points))
}

/// Everything reported for one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub degenerate: Vec<String>,
    pub roc: Vec<RocPoint>,
}

pub fn evaluate(scores: &[f64], labels: &[Class]) -> Result<MetricReport> {
    let counts = confusion(scores, labels, DEFAULT_THRESHOLD)?;
    let basic = basic_metrics(&counts);
    let (auc, roc) = roc_auc(scores, labels)?;
    Ok(MetricReport {
        accuracy: basic.accuracy,
        precision: basic.precision,
        recall: basic.recall,
        f1: basic.f1,
        auc,
        threshold: DEFAULT_THRESHOLD,
        counts,
        degenerate: basic.degenerate,
        roc,
    })
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn roc_to_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
    }
    s
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean, self.std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use proptest::prelude::*;

    fn cls(v: &[u8]) -> Vec<Class> {
        v.iter().map(|&b| if b == 1 { Class::Glaucoma } else { Class::Normal }).collect()
    }

    /// Pairwise counting: wins + ½ ties over all positive–negative pairs.
    fn pairwise_auc(scores: &[f64], labels: &[Class]) -> f64 {
        let mut twice = 0u64;
        let (mut p, mut n) = (0u64, 0u64);
        for (i, &li) in labels.iter().enumerate() {
            if li != Class::Glaucoma {
                continue;
            }
            p += 1;
            for (j, &lj) in labels.iter().enumerate() {
                if lj == Class::Glaucoma {
                    continue;
                }
                twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
        for &l in labels {
            if l != Class::Glaucoma {
                n += 1;
            }
        }
        twice as f64 / (2 * p * n) as f64
    }

    #[test]
    fn confusion_fixtures() {
        let c = confusion(&[0.9, 0.1], &cls(&[1, 0]), 0.5).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 0, tn: 1, fn_: 0 });
        let c = confusion(&[0.5], &cls(&[0]), 0.5).unwrap();
        assert_eq!(c.fp, 1, "boundary score counts as positive");
        assert!(confusion(&[], &[], 0.5).is_err());
    }

    #[test]
    fn confusion_matches_enumeration() {
        let mut rng = RngState::new(21);
        let scores: Vec<f64> = (0..100).map(|_| rng.uniform()).collect();
        let labels: Vec<Class> = (0..100).map(|_| if rng.bernoulli(0.5) { Class::Glaucoma } else { Class::Normal }).collect();
        let c = confusion(&scores, &labels, 0.5).unwrap();
        let mut e = ConfusionCounts::default();
        for i in 0..100 {
            let pred = scores[i] >= 0.5;
            let pos = labels[i] == Class::Glaucoma;
            if pred && pos { e.tp += 1 }
            if pred && !pos { e.fp += 1 }
            if !pred && !pos { e.tn += 1 }
            if !pred && pos { e.fn_ += 1 }
        }
        assert_eq!(c, e);
        assert_eq!(c.total(), 100);
    }

    #[test]
    fn basic_fixture_is_exact() {
        let m = basic_metrics(&ConfusionCounts { tp: 9, fp: 1, fn_: 1, tn: 9 });
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (0.9, 0.9, 0.9, 0.9));
        assert!(m.degenerate.is_empty());
    }

    #[test]
    fn zero_denominators_are_flagged() {
        let m = basic_metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 3, tn: 5 });
        assert_eq!(m.precision, 0.0);
        assert!(m.degenerate.contains(&"precision".to_string()));
    }

    #[test]
    fn basic_matches_formula_randomized() {
        let mut rng = RngState::new(3);
        for _ in 0..200 {
            let c = ConfusionCounts {
                tp: rng.below(50) as u64 + 1,
                fp: rng.below(50) as u64,
                tn: rng.below(50) as u64,
                fn_: rng.below(50) as u64,
            };
            let m = basic_metrics(&c);
            let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
            assert_eq!(m.accuracy, (tp + tn) / (tp + fp + tn + fn_));
            assert_eq!(m.precision, tp / (tp + fp));
            assert_eq!(m.recall, tp / (tp + fn_));
            let hm = 2.0 * m.precision * m.recall / (m.precision + m.recall);
            assert!((m.f1 - hm).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_fixtures() {
        assert_eq!(roc_auc(&[0.9, 0.1], &cls(&[1, 0])).unwrap().0, 1.0);
        assert_eq!(roc_auc(&[0.3; 6], &cls(&[1, 0, 1, 0, 0, 1])).unwrap().0, 0.5);
        let (auc, roc) = roc_auc(&[0.1, 0.4, 0.35, 0.8], &cls(&[0, 0, 1, 1])).unwrap();
        assert_eq!(auc, 0.75);
        assert_eq!(auc, pairwise_auc(&[0.1, 0.4, 0.35, 0.8], &cls(&[0, 0, 1, 1])));
        assert_eq!((roc[0].fpr, roc[0].tpr), (0.0, 0.0));
        assert_eq!((roc.last().unwrap().fpr, roc.last().unwrap().tpr), (1.0, 1.0));
        assert!(roc.windows(2).all(|w| w[0].threshold > w[1].threshold));
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(roc_auc(&[0.2, 0.4], &cls(&[1, 1])).is_err());
    }

    #[test]
    fn summary_arithmetic() {
        let s = Summary::of(&[0.9; 5]);
        assert_eq!((s.mean, s.std), (0.9, 0.0));
        let s = Summary::of(&[0.89, 0.91, 0.93, 0.91, 0.91]);
        assert!((s.mean - 0.91).abs() < 1e-12);
        assert!((s.std - 0.000_16f64.sqrt()).abs() < 1e-12);
        assert!((s.std - 0.01265).abs() < 1e-5);
        assert_eq!(Summary { mean: 0.912, std: 0.0204 }.to_string(), "0.91±0.02");
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<Class>)> {
        (2usize..200).prop_flat_map(|n| {
            (
                // Coarse grid so ties are common.
                proptest::collection::vec((0u32..20).prop_map(|v| f64::from(v) / 20.0), n),
                proptest::collection::vec(any::<bool>(), n),
            )
                .prop_filter_map("both classes", |(s, l)| {
                    let l: Vec<Class> = l.into_iter().map(|b| if b { Class::Glaucoma } else { Class::Normal }).collect();
                    let pos = l.iter().filter(|&&c| c == Class::Glaucoma).count();
                    (pos > 0 && pos < l.len()).then_some((s, l))
                })
        })
    }

    proptest! {
        #[test]
        fn trapezoid_equals_pairwise((scores, labels) in instance()) {
            let (auc, roc) = roc_auc(&scores, &labels).unwrap();
            prop_assert_eq!(auc, pairwise_auc(&scores, &labels));
            prop_assert!((0.0..=1.0).contains(&auc));
            prop_assert!(roc.iter().all(|p| (0.0..=1.0).contains(&p.fpr) && (0.0..=1.0).contains(&p.tpr)));
        }

        #[test]
        fn monotone_transform_invariance((scores, labels) in instance()) {
            let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(roc_auc(&scores, &labels).unwrap().0, roc_auc(&t, &labels).unwrap().0);
        }

        #[test]
        fn relabel_and_reflect_symmetry((scores, labels) in instance()) {
            let flipped: Vec<Class> = labels.iter().map(|&l| if l == Class::Glaucoma { Class::Normal } else { Class::Glaucoma }).collect();
            let reflected: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
            let a = roc_auc(&scores, &labels).unwrap().0;
            let b = roc_auc(&reflected, &flipped).unwrap().0;
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn accuracy_consistent_with_counts((scores, labels) in instance()) {
            let r = evaluate(&scores, &labels).unwrap();
            let correct = scores.iter().zip(&labels).filter(|(s, l)| (**s >= 0.5) == (**l == Class::Glaucoma)).count();
            prop_assert_eq!(r.accuracy, correct as f64 / scores.len() as f64);
            prop_assert_eq!(r.counts.total(), scores.len() as u64);
        }
    }
}
