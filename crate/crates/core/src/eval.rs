// SPDX-License-Identifier: Apache-2.0

//! Session-level confusion counts and precision / recall / F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
    /// Set when `tp + fp == 0`; precision is reported as 0.
    pub precision_degenerate: bool,
    /// Set when `tp + fn == 0`; recall is reported as 0.
    pub recall_degenerate: bool,
    /// Set when `precision + recall == 0`; F1 is reported as 0.
    pub f1_degenerate: bool,
}

/// F1 as the harmonic mean of `p` and `r`, 0 when both are 0.
pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

impl EvalReport {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64, threshold: f64) -> Self {
        let (precision, precision_degenerate) = ratio(tp, tp + fp);
        let (recall, recall_degenerate) = ratio(tp, tp + fn_);
        let f1 = f1_score(precision, recall);
        Self {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            threshold,
            precision_degenerate,
            recall_degenerate,
            f1_degenerate: precision + recall == 0.0,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Recomputes metrics from the stored counts.
    pub fn recomputed(&self) -> Self {
        Self::from_counts(self.tp, self.fp, self.fn_, self.tn, self.threshold)
    }
}

/// Predicts anomalous when `prob >= threshold`.
pub fn evaluate<P: Copy + Into<f64>>(probs: &[P], labels: &[bool], threshold: f64) -> Result<EvalReport> {
    if probs.len() != labels.len() {
        return Err(Error::data(format!(
            "evaluate: {} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::data("evaluate: no samples"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!("threshold must be in (0,1), got {threshold}")));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &y) in probs.iter().zip(labels) {
        match (p.into() >= threshold, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(EvalReport::from_counts(tp, fp, fn_, tn, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_decimal_f1() {
        let f = f1_score(0.96, 0.91);
        assert!((f - 0.934).abs() < 5e-4, "{f}");
        assert_eq!(format!("{f:.2}"), "0.93");
    }

    #[test]
    fn perfect_predictions() {
        let r = evaluate(&[0.9f64, 0.1, 0.7, 0.2], &[true, false, true, false], 0.5).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        assert_eq!((r.tp, r.fp, r.fn_, r.tn), (2, 0, 0, 2));
    }

    #[test]
    fn threshold_is_inclusive() {
        let r = evaluate(&[0.5f64], &[true], 0.5).unwrap();
        assert_eq!(r.tp, 1);
    }

    #[test]
    fn degenerate_denominators() {
        let r = evaluate(&[0.1f64, 0.2], &[true, false], 0.5).unwrap();
        assert!(r.precision_degenerate && r.f1_degenerate && !r.recall_degenerate);
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        let r = evaluate(&[0.1f64], &[false], 0.5).unwrap();
        assert!(r.recall_degenerate);
    }

    #[test]
    fn errors() {
        assert!(evaluate(&[0.1f64], &[true, false], 0.5).is_err());
        assert!(evaluate::<f64>(&[], &[], 0.5).is_err());
        assert!(evaluate(&[0.1f64], &[true], 1.0).is_err());
    }

    #[test]
    fn json_uses_fn_key() {
        let r = evaluate(&[0.1f32], &[true], 0.5).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["fn"], 1);
    }

    proptest! {
        #[test]
        fn counts_add_up_and_recompute(pairs in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..100), t in 0.01f64..0.99) {
            let (p, y): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
            let r = evaluate(&p, &y, t).unwrap();
            prop_assert_eq!(r.total(), p.len() as u64);
            prop_assert_eq!(r.recomputed(), r.clone());
            for m in [r.precision, r.recall, r.f1] {
                prop_assert!((0.0..=1.0).contains(&m));
            }
        }

        #[test]
        fn raising_threshold_never_raises_recall(pairs in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..100), a in 0.01f64..0.99, b in 0.01f64..0.99) {
            let (p, y): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(evaluate(&p, &y, hi).unwrap().recall <= evaluate(&p, &y, lo).unwrap().recall);
        }

        #[test]
        fn order_does_not_matter(pairs in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..60), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (p, y): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
            let (ps, ys): (Vec<f64>, Vec<bool>) = shuffled.into_iter().unzip();
            prop_assert_eq!(evaluate(&p, &y, 0.5).unwrap(), evaluate(&ps, &ys, 0.5).unwrap());
        }
    }
}
