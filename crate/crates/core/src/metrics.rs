//! Confusion matrix and IoU with ignore-label handling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeler::IGNORED;

/// Counts indexed `[gt][pred]` over `num_classes + 1` labels (0 is background).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    size: usize,
    counts: Vec<u64>,
    pub total_ignored: u64,
}

impl ConfusionMatrix {
    /// A matrix for `num_classes` foreground classes plus background.
    pub fn new(num_classes: usize) -> Self {
        let size = num_classes + 1;
        Self {
            size,
            counts: vec![0; size * size],
            total_ignored: 0,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.size + pred]
    }

    pub fn total_counted(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one label grid pair. Pixels where either side is 255 are only
    /// tallied in `total_ignored`.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("accumulate", &[pred.len()], &[gt.len()]));
        }
        let check = |v: u8| -> Result<usize> {
            let v = usize::from(v);
            if v < self.size {
                Ok(v)
            } else {
                Err(Error::Usage(format!(
                    "label value {v} outside 0..{} and not {IGNORED}",
                    self.size
                )))
            }
        };
        // validate before mutating so a bad grid leaves the matrix untouched
        for (&p, &g) in pred.iter().zip(gt) {
            if p != IGNORED && g != IGNORED {
                check(p)?;
                check(g)?;
            }
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if p == IGNORED || g == IGNORED {
                self.total_ignored += 1;
            } else {
                self.counts[usize::from(g) * self.size + usize::from(p)] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.size != self.size {
            return Err(Error::shape("merge", &[self.size], &[other.size]));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total_ignored += other.total_ignored;
        Ok(())
    }

    /// Per-label IoU; `None` where the union is empty.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.size)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..self.size).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..self.size).map(|i| self.get(i, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean over labels with a non-empty union; `None` if there are none.
    pub fn miou(&self) -> Option<f64> {
        let defined: Vec<f64> = self.iou().into_iter().flatten().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }

    pub fn report(&self) -> MetricsReport {
        let total = self.total_counted() + self.total_ignored;
        MetricsReport {
            per_class_iou: self.iou(),
            miou: self.miou(),
            ignored_fraction: if total == 0 {
                0.0
            } else {
                self.total_ignored as f64 / total as f64
            },
            counted_pixels: self.total_counted(),
            ignored_pixels: self.total_ignored,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Indexed by label id; `null` for labels absent from both sides.
    pub per_class_iou: Vec<Option<f64>>,
    /// `null` when no label has a non-empty union.
    pub miou: Option<f64>,
    pub ignored_fraction: f64,
    pub counted_pixels: u64,
    pub ignored_pixels: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_diagonal() {
        let mut cm = ConfusionMatrix::new(2);
        let g = [0, 1, 2, 1];
        cm.accumulate(&g, &g).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(1, 1), cm.get(2, 2)), (1, 2, 1));
        assert_eq!(cm.total_counted(), 4);
        assert_eq!(cm.miou(), Some(1.0));
    }

    #[test]
    fn all_ignored() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, 2, 0], &[255; 4]).unwrap();
        assert_eq!(cm.total_counted(), 0);
        assert_eq!(cm.total_ignored, 4);
        assert_eq!(cm.miou(), None);
        assert_eq!(cm.report().ignored_fraction, 1.0);
    }

    #[test]
    fn disjoint_single_class() {
        let mut cm = ConfusionMatrix::new(1);
        cm.accumulate(&[0, 0], &[1, 1]).unwrap();
        assert_eq!(cm.iou()[1], Some(0.0));
    }

    #[test]
    fn three_class_toy() {
        // gt rows, pred cols over labels 0..=2
        let mut cm = ConfusionMatrix::new(2);
        let gt = [0, 0, 0, 1, 1, 2, 2, 2];
        let pr = [0, 0, 1, 1, 2, 2, 2, 0];
        cm.accumulate(&pr, &gt).unwrap();
        let iou = cm.iou();
        // label 0: tp 2, fp 1, fn 1; label 1: tp 1, fp 1, fn 1; label 2: tp 2, fp 1, fn 1
        assert_eq!(iou, vec![Some(0.5), Some(1.0 / 3.0), Some(0.5)]);
        assert!((cm.miou().unwrap() - 4.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_rejected_without_mutation() {
        let mut cm = ConfusionMatrix::new(1);
        assert!(cm.accumulate(&[0, 2], &[0, 0]).is_err());
        assert_eq!(cm, ConfusionMatrix::new(1));
        assert!(cm.accumulate(&[0], &[0, 0]).is_err());
    }

    #[test]
    fn merge_adds() {
        let mut a = ConfusionMatrix::new(1);
        a.accumulate(&[1, 255], &[1, 0]).unwrap();
        let mut b = a.clone();
        b.merge(&a).unwrap();
        assert_eq!(b.get(1, 1), 2);
        assert_eq!(b.total_ignored, 2);
        assert!(b.merge(&ConfusionMatrix::new(3)).is_err());
    }
}
