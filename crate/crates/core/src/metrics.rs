//! Confusion-matrix segmentation metrics.

use crate::error::{LestError, Result};

/// `counts[t * K + p]` is the number of points with truth `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    ignore_label: Option<u16>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, ignore_label: Option<u16>) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
            ignore_label,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn ignore_label(&self) -> Option<u16> {
        self.ignore_label
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    /// Number of scored points.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tallies `(truth, pred)` pairs. Pairs whose truth is the ignore label
    /// are skipped. The matrix is left untouched if any id is invalid.
    pub fn accumulate(&mut self, truth: &[u16], pred: &[u16]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(LestError::contract(format!(
                "{} truth labels but {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
            if usize::from(t) >= self.classes && Some(t) != self.ignore_label {
                return Err(LestError::contract(format!(
                    "truth id {t} at index {i} is outside 0..{} and not the ignore label",
                    self.classes
                )));
            }
            if Some(t) != self.ignore_label && usize::from(p) >= self.classes {
                return Err(LestError::contract(format!(
                    "prediction id {p} at index {i} is outside 0..{} on a scored point",
                    self.classes
                )));
            }
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if Some(t) != self.ignore_label {
                self.counts[usize::from(t) * self.classes + usize::from(p)] += 1;
            }
        }
        Ok(())
    }

    /// Adds another shard's counts.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes || other.ignore_label != self.ignore_label {
            return Err(LestError::contract(
                "cannot merge confusion matrices of different shape",
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU and their mean.
    pub fn miou(&self) -> Result<Miou> {
        let k = self.classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.count(c, c);
                let fn_ = (0..k).map(|p| self.count(c, p)).sum::<u64>() - tp;
                let fp = (0..k).map(|t| self.count(t, c)).sum::<u64>() - tp;
                let den = tp + fp + fn_;
                (den > 0).then(|| tp as f64 / den as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(LestError::UndefinedMetric(
                "no class appears in truth or prediction".into(),
            ));
        }
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        Ok(Miou { per_class, miou })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Miou {
    /// `None` for classes absent from both truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tally() -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(2, None);
        cm.accumulate(&[0, 0, 0, 0, 1, 1], &[0, 0, 0, 1, 1, 1])
            .unwrap();
        cm
    }

    #[test]
    fn hand_tally() {
        let cm = tally();
        assert_eq!(
            (
                cm.count(0, 0),
                cm.count(0, 1),
                cm.count(1, 0),
                cm.count(1, 1)
            ),
            (3, 1, 0, 2)
        );
        let m = cm.miou().unwrap();
        assert_eq!(m.per_class, vec![Some(0.75), Some(2.0 / 3.0)]);
        assert!((m.miou - (0.75 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction() {
        let mut cm = ConfusionMatrix::new(4, None);
        let labels = [0, 1, 2, 3, 3, 2, 1];
        cm.accumulate(&labels, &labels).unwrap();
        assert_eq!(cm.miou().unwrap().miou, 1.0);
        for t in 0..4 {
            for p in (0..4).filter(|&p| p != t) {
                assert_eq!(cm.count(t, p), 0);
            }
        }
    }

    #[test]
    fn absent_class_is_excluded() {
        let mut cm = ConfusionMatrix::new(3, None);
        cm.accumulate(&[0, 0, 0, 0, 1, 1], &[0, 0, 0, 1, 1, 1])
            .unwrap();
        let m = cm.miou().unwrap();
        assert_eq!(m.per_class[2], None);
        assert_eq!(m.miou, tally().miou().unwrap().miou);
    }

    #[test]
    fn empty_matrix_is_undefined() {
        let mut cm = ConfusionMatrix::new(3, Some(255));
        cm.accumulate(&[], &[]).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(matches!(cm.miou(), Err(LestError::UndefinedMetric(_))));
    }

    #[test]
    fn ignore_label_skips_rows() {
        let mut cm = ConfusionMatrix::new(2, Some(255));
        cm.accumulate(&[0, 255, 1, 255], &[0, 1, 1, 0]).unwrap();
        assert_eq!(cm.total(), 2);
        assert_eq!(cm.miou().unwrap().miou, 1.0);
    }

    #[test]
    fn bad_ids_are_reported_with_index() {
        let mut cm = ConfusionMatrix::new(2, Some(255));
        let err = cm.accumulate(&[0, 1, 7], &[0, 1, 1]).unwrap_err();
        assert!(err.to_string().contains("index 2"), "{err}");
        assert!(cm.accumulate(&[0, 1], &[0, 2]).is_err());
        assert!(cm.accumulate(&[0], &[0, 1]).is_err());
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn sharded_accumulation_matches_single_pass() {
        let truth: Vec<u16> = (0..500).map(|i| (i * 7 % 5) as u16).collect();
        let pred: Vec<u16> = (0..500).map(|i| (i * 3 % 5) as u16).collect();
        let mut whole = ConfusionMatrix::new(5, None);
        whole.accumulate(&truth, &pred).unwrap();
        let mut merged = ConfusionMatrix::new(5, None);
        for (t, p) in truth.chunks(37).zip(pred.chunks(37)).rev() {
            let mut shard = ConfusionMatrix::new(5, None);
            shard.accumulate(t, p).unwrap();
            merged.merge(&shard).unwrap();
        }
        assert_eq!(whole, merged);
        assert_eq!(whole.total(), 500);
    }
}
