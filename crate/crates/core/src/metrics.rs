//! Perplexity, binary classification metrics, and the evaluation report.
//!
//! The positive class is label 1 (fake). A probability at or above the
//! threshold predicts 1. Ratios with a zero denominator are reported as 0.

use std::f64::consts::LN_2;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `2^H` for a mean cross-entropy `H` in bits.
pub fn perplexity(mean_xent_bits: f64) -> Result<f64> {
    if mean_xent_bits.is_nan() || mean_xent_bits < 0.0 {
        return Err(Error::Data(format!("cross-entropy must be ≥ 0 bits, got {mean_xent_bits}")));
    }
    Ok(mean_xent_bits.exp2())
}

pub fn nats_to_bits(nats: f64) -> f64 {
    nats / LN_2
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn n(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// The same outcomes counted with class 0 as the positive class.
    pub fn swapped(&self) -> Self {
        Self { tp: self.tn, fp: self.fn_, tn: self.tp, fn_: self.fp }
    }
}

pub fn confusion(probs: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    if probs.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in probs.iter().zip(labels) {
        let pred = p >= threshold;
        match (pred, y) {
            (true, 1) => c.tp += 1,
            (true, 0) => c.fp += 1,
            (false, 0) => c.tn += 1,
            (false, 1) => c.fn_ += 1,
            (_, other) => return Err(Error::Data(format!("label must be 0 or 1, got {other}"))),
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn classification_metrics(c: &ConfusionCounts) -> ClassificationMetrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassificationMetrics {
        accuracy: ratio(c.tp + c.tn, c.n()),
        precision,
        recall,
        f1,
    }
}

/// Mean of the per-class F1 scores over both classes.
pub fn macro_f1(c: &ConfusionCounts) -> f64 {
    0.5 * (classification_metrics(c).f1 + classification_metrics(&c.swapped()).f1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Mlm,
    Classify,
}

/// Serialized with every key present; fields of the other task are null.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub perplexity: Option<f64>,
    pub perplexity_nats_base: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub macro_f1: Option<f64>,
    pub n: u64,
    pub threshold: Option<f64>,
}

impl EvalReport {
    /// `mean_xent_nats` is the mean natural-log cross-entropy over `n` labeled positions.
    pub fn mlm(mean_xent_nats: f64, n: u64) -> Result<Self> {
        let bits = nats_to_bits(mean_xent_nats);
        Ok(Self {
            task: TaskKind::Mlm,
            perplexity: Some(perplexity(bits)?),
            perplexity_nats_base: Some(mean_xent_nats.exp()),
            accuracy: None,
            precision: None,
            recall: None,
            f1: None,
            macro_f1: None,
            n,
            threshold: None,
        })
    }

    pub fn classification(probs: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        let c = confusion(probs, labels, threshold)?;
        let m = classification_metrics(&c);
        Ok(Self {
            task: TaskKind::Classify,
            perplexity: None,
            perplexity_nats_base: None,
            accuracy: Some(m.accuracy),
            precision: Some(m.precision),
            recall: Some(m.recall),
            f1: Some(m.f1),
            macro_f1: Some(macro_f1(&c)),
            n: c.n(),
            threshold: Some(threshold),
        })
    }

    /// Checks the value ranges and that only one task's fields are set.
    pub fn validate(&self) -> Result<()> {
        let cls = [self.accuracy, self.precision, self.recall, self.f1, self.macro_f1];
        let bad = |what: &str| Err(Error::Data(format!("invalid report: {what}")));
        match self.task {
            TaskKind::Mlm => {
                if cls.iter().any(Option::is_some) || self.threshold.is_some() {
                    return bad("classification fields on an mlm report");
                }
                match self.perplexity {
                    Some(p) if p >= 1.0 && p.is_finite() => {}
                    _ => return bad("perplexity missing or below 1"),
                }
            }
            TaskKind::Classify => {
                if self.perplexity.is_some() || self.perplexity_nats_base.is_some() {
                    return bad("perplexity on a classification report");
                }
                if !cls.iter().all(|v| matches!(v, Some(x) if (0.0..=1.0).contains(x))) {
                    return bad("classification metric missing or outside [0, 1]");
                }
            }
        }
        if self.n == 0 {
            return bad("zero examples");
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perplexity_examples() {
        assert_eq!(perplexity(0.0).unwrap(), 1.0);
        assert_eq!(perplexity(5.0).unwrap(), 32.0);
        assert!((perplexity(3.4738).unwrap() - 11.11).abs() < 0.005);
        assert!(perplexity(-0.1).is_err());
        assert!(perplexity(f64::NAN).is_err());
    }

    #[test]
    fn uniform_model_in_nats() {
        let v: f64 = 50.0;
        let r = EvalReport::mlm(v.ln(), 10).unwrap();
        assert!((r.perplexity.unwrap() - v).abs() < 1e-9);
        assert!((r.perplexity_nats_base.unwrap() - v).abs() < 1e-9);
    }

    #[test]
    fn confusion_examples() {
        let c = confusion(&[1.0; 4], &[1; 4], 0.5).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 4, fp: 0, tn: 0, fn_: 0 });
        let c = confusion(&[0.5], &[0], 0.5).unwrap();
        assert_eq!(c.fp, 1);
        assert!(confusion(&[0.1], &[0, 1], 0.5).is_err());
        assert!(confusion(&[], &[], 0.5).is_err());
        assert!(confusion(&[0.1], &[2], 0.5).is_err());
    }

    #[test]
    fn hand_metrics() {
        let m = classification_metrics(&ConfusionCounts { tp: 2, fp: 1, tn: 6, fn_: 1 });
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.accuracy - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_denominators() {
        let m = classification_metrics(&ConfusionCounts { tp: 0, fp: 0, tn: 5, fn_: 3 });
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert_eq!(m.accuracy, 5.0 / 8.0);
    }

    #[test]
    fn perfect_classifier() {
        let r = EvalReport::classification(&[0.9, 0.1, 0.7], &[1, 0, 1], 0.5).unwrap();
        assert_eq!(r.accuracy, Some(1.0));
        assert_eq!(r.precision, Some(1.0));
        assert_eq!(r.recall, Some(1.0));
        assert_eq!(r.f1, Some(1.0));
        assert_eq!(r.macro_f1, Some(1.0));
        r.validate().unwrap();
    }

    #[test]
    fn report_json_keys() {
        let r = EvalReport::mlm(1.0, 3).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        let mut want = vec![
            "task", "perplexity", "perplexity_nats_base", "accuracy", "precision", "recall", "f1", "macro_f1",
            "n", "threshold",
        ];
        want.sort();
        assert_eq!(keys, want);
        assert_eq!(v["task"], "mlm");
        assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }

    proptest! {
        #[test]
        fn f1_between_precision_and_recall(tp in 1u64..50, fp in 0u64..50, tn in 0u64..50, fn_ in 0u64..50) {
            let m = classification_metrics(&ConfusionCounts { tp, fp, tn, fn_ });
            prop_assert!(m.f1 >= m.precision.min(m.recall) - 1e-15);
            prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-15);
        }

        #[test]
        fn perplexity_monotone(a in 0.0f64..20.0, b in 0.0f64..20.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(perplexity(lo).unwrap() <= perplexity(hi).unwrap());
        }
    }
}
