//! Pooled binary confusion counts and the scores derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{ApdError, Result};

/// Pixel counts with "changed" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Counts after adding one prediction/label pair of binary maps.
    pub fn accumulate(self, pred: &[u8], label: &[u8]) -> Result<Self> {
        if pred.len() != label.len() {
            return Err(ApdError::invalid(format!(
                "prediction has {} pixels, label has {}",
                pred.len(),
                label.len()
            )));
        }
        let mut out = self;
        for (&p, &y) in pred.iter().zip(label) {
            if p > 1 || y > 1 {
                return Err(ApdError::invalid("confusion inputs must be binary (0 or 1)"));
            }
            match (p, y) {
                (1, 1) => out.tp += 1,
                (1, 0) => out.fp += 1,
                (0, 1) => out.fn_ += 1,
                _ => out.tn += 1,
            }
        }
        Ok(out)
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }

    pub fn summarize(&self) -> Scores {
        let (tp, fp, fn_) = (self.tp as f64, self.fp as f64, self.fn_ as f64);
        let mut flags = Vec::new();
        let ratio = |flags: &mut Vec<String>, num: f64, den: f64, flag: &str| {
            if den == 0.0 {
                flags.push(flag.to_string());
                0.0
            } else {
                num / den
            }
        };
        let precision = ratio(&mut flags, tp, tp + fp, "precision_undefined");
        let recall = ratio(&mut flags, tp, tp + fn_, "recall_undefined");
        // 2PR/(P+R) in count form; P + R vanishes exactly when tp = 0.
        let f1 = if self.tp == 0 {
            flags.push("f1_undefined".to_string());
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        };
        let iou = ratio(&mut flags, tp, tp + fp + fn_, "iou_undefined");
        Scores {
            precision,
            recall,
            f1,
            iou,
            degenerate_flags: flags,
        }
    }
}

/// `0/0` ratios are reported as 0 and named in `degenerate_flags`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub degenerate_flags: Vec<String>,
}

/// IoU implied by an F1 score for a single binary class.
pub fn iou_from_f1(f1: f64) -> f64 {
    f1 / (2.0 - f1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    #[test]
    fn perfect_and_inverted() {
        let y = [1, 0, 1, 1, 0];
        let c = ConfusionCounts::default().accumulate(&y, &y).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let inv: Vec<u8> = y.iter().map(|v| 1 - v).collect();
        let c = ConfusionCounts::default().accumulate(&inv, &y).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn hand_counted_two_by_two() {
        let c = ConfusionCounts::default()
            .accumulate(&[1, 1, 0, 0], &[1, 0, 1, 0])
            .unwrap();
        assert_eq!(c, counts(1, 1, 1, 1));
    }

    #[test]
    fn accumulate_keeps_input() {
        let a = counts(1, 2, 3, 4);
        let b = a.accumulate(&[1], &[1]).unwrap();
        assert_eq!(a, counts(1, 2, 3, 4));
        assert_eq!(b.tp, 2);
        assert!(a.accumulate(&[1, 0], &[1]).is_err());
        assert!(a.accumulate(&[2], &[1]).is_err());
    }

    #[test]
    fn merge_identity_and_commutativity() {
        let a = counts(3, 1, 4, 1);
        let b = counts(5, 9, 2, 6);
        assert_eq!(a.merge(ConfusionCounts::default()), a);
        assert_eq!(a.merge(b), b.merge(a));
    }

    #[test]
    fn tiles_merge_to_whole_image() {
        let pred: Vec<u8> = (0..16).map(|i| ((i * 7) % 3 == 0) as u8).collect();
        let label: Vec<u8> = (0..16).map(|i| ((i * 5) % 4 < 2) as u8).collect();
        let whole = ConfusionCounts::default().accumulate(&pred, &label).unwrap();
        let merged = (0..4)
            .map(|t| {
                let (ty, tx) = (t / 2, t % 2);
                let idx: Vec<usize> = (0..4)
                    .map(|k| (ty * 2 + k / 2) * 4 + tx * 2 + k % 2)
                    .collect();
                let p: Vec<u8> = idx.iter().map(|&i| pred[i]).collect();
                let l: Vec<u8> = idx.iter().map(|&i| label[i]).collect();
                ConfusionCounts::default().accumulate(&p, &l).unwrap()
            })
            .fold(ConfusionCounts::default(), ConfusionCounts::merge);
        assert_eq!(whole, merged);
    }

    #[test]
    fn hand_computed_scores() {
        let s = counts(2, 1, 1, 0).summarize();
        for v in [s.precision, s.recall, s.f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(s.iou, 0.5);
        assert!(s.degenerate_flags.is_empty());
    }

    #[test]
    fn all_negative_is_flagged() {
        let s = counts(0, 0, 0, 10).summarize();
        assert_eq!((s.precision, s.recall, s.f1, s.iou), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(s.degenerate_flags.len(), 4);
    }

    #[test]
    fn reported_pair_is_consistent() {
        let iou = iou_from_f1(0.9171);
        assert!((iou - 0.8469).abs() < 0.5e-4, "{iou}");
    }

    proptest! {
        #[test]
        fn iou_identity_and_ordering(tp in 0u64..10_000, fp in 0u64..10_000, fn_ in 0u64..10_000, tn in 0u64..10_000) {
            let s = counts(tp, fp, fn_, tn).summarize();
            prop_assert!((s.iou - iou_from_f1(s.f1)).abs() <= 1e-12);
            prop_assert!(0.0 <= s.iou && s.iou <= s.f1 && s.f1 <= 1.0);
            if tp > 0 {
                let p = s.precision;
                let r = s.recall;
                prop_assert!((s.f1 - 2.0 * p * r / (p + r)).abs() < 1e-12);
            }
        }

        #[test]
        fn pooled_scores_depend_on_sums_only(a in proptest::array::uniform4(0u64..500), b in proptest::array::uniform4(0u64..500)) {
            let x = counts(a[0], a[1], a[2], a[3]);
            let y = counts(b[0], b[1], b[2], b[3]);
            let sums = counts(a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]);
            prop_assert_eq!(x.merge(y).summarize(), sums.summarize());
        }
    }
}
