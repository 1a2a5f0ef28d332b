//! Set-prediction machinery: boxes, Hungarian matching, the training loss
//! and the AP evaluator.

mod boxes;
mod coco;
mod hungarian;
mod loss;

pub use boxes::{corners, giou, iou, BoxCxCyWh};
pub use coco::{evaluate_ap, iou_thresholds, ApReport, ScoredBoxes, MAX_DETECTIONS};
pub use hungarian::{hungarian_match, CostMatrix, Matching};
pub use loss::{matching_cost, set_loss, LossWeights, SetLoss};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::ops::softmax_in_place;
use crate::numerics::{Scalar, Tensor};

/// Per-query class logits (last column is "no object") and normalized
/// `(cx, cy, w, h)` boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection<F> {
    pub class_logits: Tensor<F>,
    pub boxes: Tensor<F>,
}

impl<F: Scalar> Detection<F> {
    pub fn new(class_logits: Tensor<F>, boxes: Tensor<F>) -> Result<Self> {
        let d = Self { class_logits, boxes };
        loss::check_prediction(&d)?;
        Ok(d)
    }

    pub fn num_queries(&self) -> usize {
        self.boxes.dims()[0]
    }

    /// Object classes, excluding "no object".
    pub fn num_classes(&self) -> usize {
        self.class_logits.dims()[1] - 1
    }

    pub fn box_at(&self, q: usize) -> BoxCxCyWh {
        let r = self.boxes.row(q);
        [r[0].as_f64(), r[1].as_f64(), r[2].as_f64(), r[3].as_f64()]
    }

    /// Row-wise softmax of the class logits, "no object" column included.
    pub fn class_probabilities(&self) -> Vec<f64> {
        let width = self.num_classes() + 1;
        let mut p: Vec<f64> = self.class_logits.data().iter().map(|v| v.as_f64()).collect();
        for row in p.chunks_mut(width) {
            softmax_in_place(row);
        }
        p
    }

    /// One scored box per query: the most probable object class and its
    /// softmax probability (the "no object" column takes part in the
    /// softmax but is never reported).
    pub fn scored(&self) -> ScoredBoxes {
        let nc = self.num_classes();
        let probs = self.class_probabilities();
        let mut out = ScoredBoxes::default();
        for (q, p) in probs.chunks(nc + 1).enumerate() {
            let (label, score) = p[..nc]
                .iter()
                .copied()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (c, s)| if s > best.1 { (c, s) } else { best },
                );
            out.boxes.push(self.box_at(q));
            out.scores.push(score);
            out.labels.push(label);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.class_logits.is_finite() && self.boxes.is_finite()
    }

    pub fn cast<G: Scalar>(&self) -> Detection<G> {
        Detection {
            class_logits: self.class_logits.cast(),
            boxes: self.boxes.cast(),
        }
    }
}

/// Ground-truth objects of one frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boxes: Vec<BoxCxCyWh>,
    pub labels: Vec<usize>,
}

/// Slack for boxes that touch the image border after decimal rounding.
const BORDER_SLACK: f64 = 1e-9;

impl GroundTruth {
    pub fn new(boxes: Vec<BoxCxCyWh>, labels: Vec<usize>) -> Result<Self> {
        let gt = Self { boxes, labels };
        gt.check_boxes()?;
        Ok(gt)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    fn check_boxes(&self) -> Result<()> {
        if self.boxes.len() != self.labels.len() {
            return Err(invalid!("{} boxes but {} labels", self.boxes.len(), self.labels.len()));
        }
        for b in &self.boxes {
            if b.iter().any(|v| !v.is_finite()) || !(b[2] > 0.0 && b[2] <= 1.0 && b[3] > 0.0 && b[3] <= 1.0) {
                return Err(invalid!("box {b:?} needs 0 < w, h <= 1"));
            }
            let c = corners(b);
            if c[0] < -BORDER_SLACK || c[1] < -BORDER_SLACK || c[2] > 1.0 + BORDER_SLACK || c[3] > 1.0 + BORDER_SLACK {
                return Err(invalid!("box {b:?} leaves the unit square"));
            }
        }
        Ok(())
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.check_boxes()?;
        if let Some(l) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(invalid!("label {l} outside {num_classes} classes"));
        }
        Ok(())
    }

    /// Mirror image under a horizontal flip.
    pub fn flipped(&self) -> Self {
        Self {
            boxes: self.boxes.iter().map(|b| [1.0 - b[0], b[1], b[2], b[3]]).collect(),
            labels: self.labels.clone(),
        }
    }
}
