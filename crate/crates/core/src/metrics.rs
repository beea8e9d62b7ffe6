//! Pixel confusion counts and segmentation scores, with cell (label 0) as
//! the positive class.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Mask, CELL};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// The same counts seen with prediction and ground truth exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            fp: self.fn_,
            fn_: self.fp,
            ..*self
        }
    }
}

impl core::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl core::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape(
            "confusion",
            format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            ),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        match (p == CELL, g == CELL) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub miou: f64,
    /// `2TP / (2TP + FP + FN)`.
    pub dice: f64,
    /// `2TP / (TP + FP + FN)`, which reaches 2 on a perfect prediction.
    pub dice_paper: f64,
    /// Set when any score had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

impl MetricReport {
    pub const FIELDS: [&'static str; 7] = [
        "accuracy",
        "recall",
        "precision",
        "f1",
        "miou",
        "dice",
        "dice_paper",
    ];

    pub fn values(&self) -> [f64; 7] {
        [
            self.accuracy,
            self.recall,
            self.precision,
            self.f1,
            self.miou,
            self.dice,
            self.dice_paper,
        ]
    }
}

struct Ratio {
    degenerate: bool,
}

impl Ratio {
    fn of(&mut self, num: f64, den: f64) -> f64 {
        if den == 0.0 {
            self.degenerate = true;
            0.0
        } else {
            num / den
        }
    }
}

/// Scores from counts. mIoU averages the cell and background IoU over the
/// classes that occur in either mask.
pub fn scores(c: &ConfusionCounts) -> Result<MetricReport> {
    if c.total() == 0 {
        return Err(Error::Empty("scores"));
    }
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let mut r = Ratio { degenerate: false };
    let accuracy = r.of(tp + tn, tp + tn + fp + fn_);
    let recall = r.of(tp, tp + fn_);
    let precision = r.of(tp, tp + fp);
    let f1 = r.of(2.0 * precision * recall, precision + recall);
    let dice = r.of(2.0 * tp, 2.0 * tp + fp + fn_);
    let dice_paper = r.of(2.0 * tp, tp + fp + fn_);
    let cell_den = tp + fp + fn_;
    let bg_den = tn + fn_ + fp;
    let mut iou_sum = 0.0;
    let mut classes = 0.0;
    for (num, den) in [(tp, cell_den), (tn, bg_den)] {
        if den > 0.0 {
            iou_sum += num / den;
            classes += 1.0;
        }
    }
    let miou = r.of(iou_sum, classes);
    Ok(MetricReport {
        accuracy,
        recall,
        precision,
        f1,
        miou,
        dice,
        dice_paper,
        degenerate: r.degenerate,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Score the summed counts.
    #[default]
    Micro,
    /// Mean of the per-image scores.
    Macro,
}

pub fn aggregate(counts: &[ConfusionCounts], mode: Aggregation) -> Result<MetricReport> {
    if counts.is_empty() {
        return Err(Error::Empty("aggregate"));
    }
    match mode {
        Aggregation::Micro => scores(&counts.iter().copied().sum()),
        Aggregation::Macro => {
            let mut acc = [0.0; 7];
            let mut degenerate = false;
            for c in counts {
                let r = scores(c)?;
                degenerate |= r.degenerate;
                for (a, v) in acc.iter_mut().zip(r.values()) {
                    *a += v;
                }
            }
            let n = counts.len() as f64;
            let [accuracy, recall, precision, f1, miou, dice, dice_paper] = acc.map(|v| v / n);
            Ok(MetricReport {
                accuracy,
                recall,
                precision,
                f1,
                miou,
                dice,
                dice_paper,
                degenerate,
            })
        }
    }
}
