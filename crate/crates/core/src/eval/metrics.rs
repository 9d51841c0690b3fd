//! Confusion matrix and IoU bookkeeping.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `counts[truth][prediction]`; ignore-labeled points are never counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    ignore_id: u32,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize, ignore_id: u32) -> Self {
        ConfusionMatrix {
            num_classes,
            ignore_id,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    fn check(&self, id: u32) -> Result<usize> {
        if (id as usize) < self.num_classes {
            Ok(id as usize)
        } else {
            Err(Error::ClassOutOfRange {
                id,
                num_classes: self.num_classes,
            })
        }
    }

    /// Adds one count per pair whose truth is not the ignore id.
    pub fn update(&mut self, truth: &[u32], pred: &[u32]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::LabelCount {
                labels: pred.len(),
                points: truth.len(),
            });
        }
        // validate first so a bad id leaves the matrix untouched
        for (&t, &p) in truth.iter().zip(pred) {
            if t != self.ignore_id {
                self.check(t)?;
                self.check(p)?;
            }
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t != self.ignore_id {
                self.counts[t as usize * self.num_classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape(format!(
                "merging {}-class into {}-class matrix",
                other.num_classes, self.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; `None` for classes with no truth and no prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|i| {
                let tp = self.get(i, i);
                let row: u64 = (0..k).map(|j| self.get(i, j)).sum();
                let col: u64 = (0..k).map(|j| self.get(j, i)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean over classes that appear in truth or prediction; `None` if none do.
    pub fn miou(&self) -> Option<f64> {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }

    /// Percentages with one decimal; absent classes are marked `n/a` and
    /// left out of the mean.
    pub fn format_table(&self, names: Option<&[String]>) -> String {
        let mut s = String::from("class            IoU(%)\n");
        for (i, iou) in self.per_class_iou().iter().enumerate() {
            let name = names
                .and_then(|n| n.get(i).cloned())
                .unwrap_or_else(|| format!("class_{i}"));
            match iou {
                Some(v) => {
                    let _ = writeln!(s, "{name:<16} {:>6.1}", 100.0 * v);
                }
                None => {
                    let _ = writeln!(s, "{name:<16} {:>6}", "n/a");
                }
            }
        }
        match self.miou() {
            Some(m) => {
                let _ = writeln!(s, "{:<16} {:>6.1}", "mIoU", 100.0 * m);
            }
            None => {
                let _ = writeln!(s, "{:<16} {:>6}", "mIoU", "undefined");
            }
        }
        s.push_str("(classes absent from both truth and prediction are excluded from the mean)\n");
        s
    }
}

/// IoU and mIoU from a confusion matrix.
pub fn compute_miou(cm: &ConfusionMatrix) -> (Vec<Option<f64>>, Option<f64>) {
    (cm.per_class_iou(), cm.miou())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions_are_diagonal() {
        let mut cm = ConfusionMatrix::new(3, 255);
        cm.update(&[0, 1, 2, 2, 255], &[0, 1, 2, 2, 0]).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.get(t, p) > 0, t == p);
            }
        }
        assert_eq!(cm.miou(), Some(1.0));
    }

    #[test]
    fn single_off_diagonal() {
        let mut cm = ConfusionMatrix::new(3, 255);
        cm.update(&[1], &[2]).unwrap();
        assert_eq!(cm.get(1, 2), 1);
    }

    #[test]
    fn hand_counted_iou() {
        // counts [[1,1],[0,1]]
        let mut cm = ConfusionMatrix::new(2, 255);
        cm.update(&[0, 0, 1], &[0, 1, 1]).unwrap();
        let (ious, m) = compute_miou(&cm);
        assert_eq!(ious, vec![Some(0.5), Some(0.5)]);
        assert_eq!(m, Some(0.5));
    }

    #[test]
    fn absent_class_is_excluded() {
        let mut cm = ConfusionMatrix::new(3, 255);
        cm.update(&[0, 1], &[0, 1]).unwrap();
        assert_eq!(cm.per_class_iou()[2], None);
        assert_eq!(cm.miou(), Some(1.0));
        assert_eq!(ConfusionMatrix::new(2, 255).miou(), None);
    }

    #[test]
    fn out_of_range_ids_rejected() {
        let mut cm = ConfusionMatrix::new(2, 255);
        assert!(cm.update(&[0, 2], &[0, 0]).is_err());
        assert!(cm.update(&[0], &[7]).is_err());
        assert_eq!(cm, ConfusionMatrix::new(2, 255));
        assert!(cm.update(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn table_uses_one_decimal_percentages() {
        let mut cm = ConfusionMatrix::new(2, 255);
        cm.update(&[0, 0, 1], &[0, 1, 1]).unwrap();
        let t = cm.format_table(None);
        assert!(t.contains("class_0            50.0"));
        assert!(t.contains("mIoU               50.0"));
    }

    proptest! {
        #[test]
        fn merge_equals_sequential_update(
            a in proptest::collection::vec((0u32..4, 0u32..4), 0..50),
            b in proptest::collection::vec((0u32..4, 0u32..4), 0..50),
        ) {
            let split = |v: &[(u32, u32)]| -> (Vec<u32>, Vec<u32>) { v.iter().cloned().unzip() };
            let (ta, pa) = split(&a);
            let (tb, pb) = split(&b);
            let mut seq = ConfusionMatrix::new(4, 255);
            seq.update(&ta, &pa).unwrap();
            seq.update(&tb, &pb).unwrap();
            let mut left = ConfusionMatrix::new(4, 255);
            left.update(&ta, &pa).unwrap();
            let mut right = ConfusionMatrix::new(4, 255);
            right.update(&tb, &pb).unwrap();
            left.merge(&right).unwrap();
            prop_assert_eq!(&left, &seq);
            // order of updates never matters
            let mut rev = ConfusionMatrix::new(4, 255);
            rev.update(&tb, &pb).unwrap();
            rev.update(&ta, &pa).unwrap();
            prop_assert_eq!(rev.miou(), seq.miou());
        }
    }
}
