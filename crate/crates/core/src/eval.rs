//! Confusion-matrix accumulation and mean intersection-over-union.

use crate::{Error, Result};

/// `C x C` counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

/// Per-class IoU; `None` for classes that were never seen nor predicted.
#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, truth: usize, prediction: usize) -> u64 {
        self.counts[truth * self.num_classes + prediction]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tallies prediction/truth pairs; pairs with ignored truth are skipped
    /// entirely. Ids must be `< C` or the ignore id.
    pub fn accumulate(
        &mut self,
        predictions: &[u16],
        truth: &[u16],
        ignore_id: u16,
    ) -> Result<()> {
        if predictions.len() != truth.len() {
            return Err(Error::contract(format!(
                "accumulate: {} predictions vs {} truth labels",
                predictions.len(),
                truth.len()
            )));
        }
        let c = self.num_classes;
        for (&p, &t) in predictions.iter().zip(truth) {
            if t == ignore_id {
                continue;
            }
            if (t as usize) >= c || (p as usize) >= c {
                return Err(Error::contract(format!(
                    "accumulate: pair (truth {t}, prediction {p}) out of range for {c} classes"
                )));
            }
            self.counts[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    /// Entrywise sum; accumulation order never matters.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.num_classes != other.num_classes {
            return Err(Error::contract("merge: class count mismatch"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `IoU_c = TP / (TP + FP + FN)`; classes with an empty row and column
    /// are absent and excluded from the mean.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.counts[k * c + k];
                let row: u64 = (0..c).map(|j| self.counts[k * c + j]).sum();
                let col: u64 = (0..c).map(|i| self.counts[i * c + k]).sum();
                if row + col == 0 {
                    return None;
                }
                let denom = row + col - tp;
                Some(tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Arithmetic mean over present classes.
    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::contract("miou: no class was seen or predicted"));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn report(&self) -> Result<IouReport> {
        Ok(IouReport {
            per_class: self.iou_per_class(),
            mean: self.miou()?,
        })
    }

    /// Overall point accuracy (diagonal / total), for progress logging.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.num_classes)
            .map(|k| self.counts[k * self.num_classes + k])
            .sum();
        correct as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions_fill_the_diagonal() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 2, 1], &[0, 1, 2, 1], 255).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                let expect = match (t, p) {
                    (1, 1) => 2,
                    (a, b) if a == b => 1,
                    _ => 0,
                };
                assert_eq!(cm.count(t, p), expect);
            }
        }
        assert_abs_diff_eq!(cm.miou().unwrap(), 1.0);
    }

    #[test]
    fn ignored_truth_leaves_matrix_unchanged() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 2], &[255, 255, 255], 255).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn out_of_range_ids_are_contract_errors() {
        let mut cm = ConfusionMatrix::new(3);
        assert!(cm.accumulate(&[3], &[0], 255).is_err());
        assert!(cm.accumulate(&[0], &[7], 255).is_err());
    }

    #[test]
    fn mixed_stream_matches_hand_tally() {
        let mut cm = ConfusionMatrix::new(3);
        let truth = [0u16, 0, 1, 1, 2, 255];
        let pred = [0u16, 1, 1, 1, 0, 2];
        cm.accumulate(&pred, &truth, 255).unwrap();
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.count(1, 1), 2);
        assert_eq!(cm.count(2, 0), 1);
        assert_eq!(cm.total(), 5);
    }

    #[test]
    fn all_ones_two_class_matrix_gives_third() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, 0, 1], &[0, 0, 1, 1], 255).unwrap();
        let ious = cm.iou_per_class();
        assert_abs_diff_eq!(ious[0].unwrap(), 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ious[1].unwrap(), 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cm.miou().unwrap(), 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn unseen_class_is_flagged_absent_and_excluded() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 0], &[0, 1], 255).unwrap();
        let ious = cm.iou_per_class();
        assert!(ious[2].is_none());
        // class 0: tp 1, fp 1, fn 0 -> 1/2; class 1: tp 0, fn 1 -> 0
        assert_abs_diff_eq!(cm.miou().unwrap(), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn single_present_class_half_iou() {
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&[1, 2], &[1, 1], 255).unwrap();
        // class 1: tp 1, fn 1 -> 1/2; class 2: tp 0, fp 1 -> 0
        let ious = cm.iou_per_class();
        assert_abs_diff_eq!(ious[1].unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn empty_matrix_miou_errors() {
        let cm = ConfusionMatrix::new(3);
        assert!(cm.miou().is_err());
    }

    proptest! {
        #[test]
        fn accumulation_is_mergeable_and_order_free(
            stream_a in prop::collection::vec((0u16..4, 0u16..4), 0..64),
            stream_b in prop::collection::vec((0u16..4, 0u16..4), 0..64),
        ) {
            let apply = |cm: &mut ConfusionMatrix, s: &[(u16, u16)]| {
                let pred: Vec<u16> = s.iter().map(|x| x.0).collect();
                let truth: Vec<u16> = s.iter().map(|x| x.1).collect();
                cm.accumulate(&pred, &truth, 255).unwrap();
            };
            let mut merged = ConfusionMatrix::new(4);
            let mut part_a = ConfusionMatrix::new(4);
            let mut part_b = ConfusionMatrix::new(4);
            apply(&mut part_a, &stream_a);
            apply(&mut part_b, &stream_b);
            merged.merge(&part_a).unwrap();
            merged.merge(&part_b).unwrap();

            let mut joint = ConfusionMatrix::new(4);
            apply(&mut joint, &stream_a);
            apply(&mut joint, &stream_b);
            prop_assert_eq!(&merged, &joint);

            // IoUs live in [0, 1]; the mean lies between the extremes.
            if joint.total() > 0 {
                let ious: Vec<f64> = joint.iou_per_class().into_iter().flatten().collect();
                let m = joint.miou().unwrap();
                let lo = ious.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = ious.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(ious.iter().all(|&v| (0.0..=1.0).contains(&v)));
                prop_assert!(lo - 1e-12 <= m && m <= hi + 1e-12);
            }
        }
    }
}
