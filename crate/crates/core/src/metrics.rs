//! Segmentation and classification metrics with mergeable accumulators.
//!
//! Pixel-level quality is tracked by a [`ConfusionAccumulator`] (one cell per
//! true/predicted class pair) from which per-class IoU and Dice coefficients
//! are derived. Scan-level grading quality is tracked by a
//! [`ClassificationTally`] of one-vs-rest counts per grade group, from which
//! TPR/PPV/F1 are derived. Both accumulators merge by entrywise addition, so
//! work can be split per patch or per scan and folded at the end.

use crate::error::{Error, Result};
use crate::labels::GradeGroup;
use crate::raster::Raster;
use serde::{Deserialize, Serialize};

/// Pixel confusion counts: `matrix[true_class][pred_class]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    num_classes: usize,
    matrix: Vec<u64>,
    pixel_total: u64,
}

impl ConfusionAccumulator {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidArgument(
                "num_classes must be positive".into(),
            ));
        }
        Ok(ConfusionAccumulator {
            num_classes,
            matrix: vec![0; num_classes * num_classes],
            pixel_total: 0,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn pixel_total(&self) -> u64 {
        self.pixel_total
    }

    /// Count of pixels with the given true and predicted class.
    pub fn count(&self, true_class: usize, pred_class: usize) -> u64 {
        self.matrix[true_class * self.num_classes + pred_class]
    }

    /// Accumulates one predicted/true mask pair.
    pub fn accumulate(&mut self, pred_mask: &Raster<u8>, true_mask: &Raster<u8>) -> Result<()> {
        if !pred_mask.same_shape(true_mask) {
            return Err(Error::ShapeMismatch(format!(
                "predicted mask {}x{} vs true mask {}x{}",
                pred_mask.width(),
                pred_mask.height(),
                true_mask.width(),
                true_mask.height()
            )));
        }
        for (&p, &t) in pred_mask.pixels().iter().zip(true_mask.pixels()) {
            let (p, t) = (p as usize, t as usize);
            if p >= self.num_classes {
                return Err(Error::ClassIndexOutOfRange {
                    index: p,
                    num_classes: self.num_classes,
                });
            }
            if t >= self.num_classes {
                return Err(Error::ClassIndexOutOfRange {
                    index: t,
                    num_classes: self.num_classes,
                });
            }
            self.matrix[t * self.num_classes + p] += 1;
            self.pixel_total += 1;
        }
        Ok(())
    }

    /// Entrywise sum with another accumulator over the same classes.
    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if self.num_classes != other.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "cannot merge accumulators over {} and {} classes",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.matrix.iter_mut().zip(&other.matrix) {
            *a += b;
        }
        self.pixel_total += other.pixel_total;
        Ok(())
    }

    fn tp_fp_fn(&self, class: usize) -> (u64, u64, u64) {
        let c = self.num_classes;
        let tp = self.matrix[class * c + class];
        let mut row = 0;
        let mut col = 0;
        for k in 0..c {
            row += self.matrix[class * c + k];
            col += self.matrix[k * c + class];
        }
        (tp, col - tp, row - tp)
    }

    /// Per-class IoU `TP/(TP+FP+FN)`; `None` where the class is absent from
    /// both masks.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|j| {
                let (tp, fp, fn_) = self.tp_fp_fn(j);
                let den = tp + fp + fn_;
                (den > 0).then(|| tp as f64 / den as f64)
            })
            .collect()
    }

    /// Per-class Dice coefficient `2TP/(2TP+FP+FN)`; `None` where undefined.
    pub fn dice_per_class(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|j| {
                let (tp, fp, fn_) = self.tp_fp_fn(j);
                let den = 2 * tp + fp + fn_;
                (den > 0).then(|| 2.0 * tp as f64 / den as f64)
            })
            .collect()
    }

    /// Mean IoU over defined classes. Class 0 (background) is excluded unless
    /// `include_background` is set; errors if no class is defined.
    pub fn mean_iou(&self, include_background: bool) -> Result<f64> {
        let start = usize::from(!include_background);
        let defined: Vec<f64> = self
            .iou_per_class()
            .into_iter()
            .skip(start)
            .flatten()
            .collect();
        if defined.is_empty() {
            return Err(Error::EmptyInput("no class with a defined IoU".into()));
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }

    /// Mean Dice coefficient over defined classes, same conventions as
    /// [`mean_iou`](Self::mean_iou).
    pub fn mean_dice(&self, include_background: bool) -> Result<f64> {
        let start = usize::from(!include_background);
        let defined: Vec<f64> = self
            .dice_per_class()
            .into_iter()
            .skip(start)
            .flatten()
            .collect();
        if defined.is_empty() {
            return Err(Error::EmptyInput(
                "no class with a defined Dice score".into(),
            ));
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// One-vs-rest outcome counts for a single grade group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OneVsRest {
    pub true_positive: u64,
    pub false_positive: u64,
    pub false_negative: u64,
    pub true_negative: u64,
}

impl OneVsRest {
    pub fn total(&self) -> u64 {
        self.true_positive + self.false_positive + self.false_negative + self.true_negative
    }
}

/// Scan-level one-vs-rest counts per grade group.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationTally {
    counts: [OneVsRest; GradeGroup::ALL.len()],
}

impl ClassificationTally {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records one scan: for each grade, a true/false positive/negative in
    /// the one-vs-rest sense.
    pub fn record(&mut self, predicted: GradeGroup, truth: GradeGroup) {
        for grade in GradeGroup::ALL {
            let cell = &mut self.counts[grade.index()];
            match (predicted == grade, truth == grade) {
                (true, true) => cell.true_positive += 1,
                (true, false) => cell.false_positive += 1,
                (false, true) => cell.false_negative += 1,
                (false, false) => cell.true_negative += 1,
            }
        }
    }

    pub fn merge(&mut self, other: &ClassificationTally) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.true_positive += b.true_positive;
            a.false_positive += b.false_positive;
            a.false_negative += b.false_negative;
            a.true_negative += b.true_negative;
        }
    }

    pub fn counts(&self, grade: GradeGroup) -> OneVsRest {
        self.counts[grade.index()]
    }

    /// Total scans recorded (identical for every grade row).
    pub fn total_scans(&self) -> u64 {
        self.counts[0].total()
    }
}

/// Derived classification scores for one grade group; `None` marks an
/// undefined ratio (zero denominator).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradeScores {
    pub grade: GradeGroup,
    /// Scans whose true grade is this grade.
    pub support: u64,
    pub true_positive_rate: Option<f64>,
    pub positive_predictive_value: Option<f64>,
    pub f1: Option<f64>,
}

/// Per-grade TPR, PPV and F1 from a tally.
///
/// F1 is computed as `2TP/(2TP+FP+FN)`, which equals the harmonic mean of
/// TPR and PPV whenever both are defined and is undefined only when the
/// grade occurs in neither predictions nor truth.
pub fn classification_report(tally: &ClassificationTally) -> Vec<GradeScores> {
    GradeGroup::ALL
        .iter()
        .map(|&grade| {
            let c = tally.counts(grade);
            let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
            GradeScores {
                grade,
                support: c.true_positive + c.false_negative,
                true_positive_rate: ratio(c.true_positive, c.true_positive + c.false_negative),
                positive_predictive_value: ratio(
                    c.true_positive,
                    c.true_positive + c.false_positive,
                ),
                f1: ratio(
                    2 * c.true_positive,
                    2 * c.true_positive + c.false_positive + c.false_negative,
                ),
            }
        })
        .collect()
}
