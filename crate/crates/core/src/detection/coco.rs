//! COCO-style average precision: IoU thresholds 0.50:0.05:0.95, greedy
//! per-frame matching in score order, 101-point interpolated precision,
//! averaged over classes that have ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

use super::boxes::{iou, BoxCxCyWh};
use super::GroundTruth;

pub const MAX_DETECTIONS: usize = 100;

/// Scored detections of one frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoredBoxes {
    pub boxes: Vec<BoxCxCyWh>,
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
}

impl ScoredBoxes {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// AP of one class at one IoU threshold, or `None` when the class has no ground truth.
fn class_ap(preds: &[ScoredBoxes], gts: &[GroundTruth], class: usize, threshold: f64) -> Option<f64> {
    let n_gt: usize = gts
        .iter()
        .map(|g| g.labels.iter().filter(|&&l| l == class).count())
        .sum();
    if n_gt == 0 {
        return None;
    }
    // (score, frame, box index, is_true_positive)
    let mut hits: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (frame, (pred, gt)) in preds.iter().zip(gts).enumerate() {
        let mut dets: Vec<usize> = (0..pred.len()).filter(|&i| pred.labels[i] == class).collect();
        dets.sort_by(|&a, &b| pred.scores[b].total_cmp(&pred.scores[a]).then(a.cmp(&b)));
        dets.truncate(MAX_DETECTIONS);
        let gt_idx: Vec<usize> = (0..gt.len()).filter(|&j| gt.labels[j] == class).collect();
        let mut taken = vec![false; gt_idx.len()];
        for d in dets {
            let mut best = threshold.min(1.0 - 1e-10);
            let mut matched = None;
            for (slot, &j) in gt_idx.iter().enumerate() {
                if taken[slot] {
                    continue;
                }
                let v = iou(&pred.boxes[d], &gt.boxes[j]);
                if v < best {
                    continue;
                }
                best = v;
                matched = Some(slot);
            }
            if let Some(slot) = matched {
                taken[slot] = true;
            }
            hits.push((pred.scores[d], frame, d, matched.is_some()));
        }
    }
    hits.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for h in &hits {
        if h.3 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        let idx = recall.partition_point(|&v| v < target);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    Some(total / 101.0)
}

/// Mean AP over IoU thresholds and classes, plus the single-threshold AP50 and AP75.
pub fn evaluate_ap(preds: &[ScoredBoxes], gts: &[GroundTruth], num_classes: usize) -> Result<ApReport> {
    if preds.len() != gts.len() {
        return Err(invalid!(
            "{} prediction frames but {} ground-truth frames",
            preds.len(),
            gts.len()
        ));
    }
    for p in preds {
        if p.scores.len() != p.len() || p.labels.len() != p.len() {
            return Err(invalid!("scored boxes have ragged fields"));
        }
    }
    let mean_over_classes = |t: f64| -> Option<f64> {
        let aps: Vec<f64> = (0..num_classes).filter_map(|c| class_ap(preds, gts, c, t)).collect();
        (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
    };
    let per_threshold: Vec<f64> = iou_thresholds()
        .iter()
        .map(|&t| mean_over_classes(t).unwrap_or(0.0))
        .collect();
    Ok(ApReport {
        ap: per_threshold.iter().sum::<f64>() / per_threshold.len() as f64,
        ap50: per_threshold[0],
        ap75: per_threshold[5],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(boxes: Vec<BoxCxCyWh>, labels: Vec<usize>) -> GroundTruth {
        GroundTruth::new(boxes, labels).unwrap()
    }

    #[test]
    fn perfect_detector() {
        let gts = vec![
            gt(vec![[0.3, 0.3, 0.2, 0.2]], vec![0]),
            gt(vec![[0.6, 0.4, 0.3, 0.1], [0.2, 0.8, 0.1, 0.1]], vec![1, 0]),
        ];
        let preds: Vec<ScoredBoxes> = gts
            .iter()
            .map(|g| ScoredBoxes {
                boxes: g.boxes.clone(),
                scores: vec![1.0; g.len()],
                labels: g.labels.clone(),
            })
            .collect();
        let r = evaluate_ap(&preds, &gts, 2).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75), (1.0, 1.0, 1.0));
    }

    #[test]
    fn no_predictions() {
        let gts = vec![gt(vec![[0.3, 0.3, 0.2, 0.2]], vec![0])];
        let r = evaluate_ap(&[ScoredBoxes::default()], &gts, 2).unwrap();
        assert_eq!(r, ApReport::default());
    }

    /// Three frames, one object each. Frame 0 gets a detection at IoU 0.6
    /// (score 0.9), frame 1 a disjoint false positive (score 0.8), frame 2 nothing.
    ///
    /// Hand-executed PR curve: recall [1/3, 1/3], precision [1, 1/2] for
    /// thresholds 0.50, 0.55 and 0.60; recall 0 above. The 101-point sampling
    /// hits precision 1 for the 34 recall levels 0.00..=0.33 and 0 after, so
    /// AP at those thresholds is 34/101. AP = 3 * (34/101) / 10, AP75 = 0.
    #[test]
    fn handcrafted_pr_curve() {
        let gts = vec![
            gt(vec![[0.25, 0.25, 0.5, 0.5]], vec![0]),
            gt(vec![[0.7, 0.7, 0.2, 0.2]], vec![0]),
            gt(vec![[0.5, 0.5, 0.2, 0.2]], vec![0]),
        ];
        assert_eq!(iou(&[0.375, 0.25, 0.5, 0.5], &gts[0].boxes[0]), 0.6);
        let preds = vec![
            ScoredBoxes {
                boxes: vec![[0.375, 0.25, 0.5, 0.5]],
                scores: vec![0.9],
                labels: vec![0],
            },
            ScoredBoxes {
                boxes: vec![[0.2, 0.2, 0.1, 0.1]],
                scores: vec![0.8],
                labels: vec![0],
            },
            ScoredBoxes::default(),
        ];
        let r = evaluate_ap(&preds, &gts, 2).unwrap();
        assert!((r.ap50 - 34.0 / 101.0).abs() < 1e-15);
        assert_eq!(r.ap75, 0.0);
        assert!((r.ap - 3.0 * (34.0 / 101.0) / 10.0).abs() < 1e-15);
    }

    #[test]
    fn prediction_order_does_not_matter() {
        let gts = vec![gt(vec![[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]], vec![0, 0])];
        let a = ScoredBoxes {
            boxes: vec![[0.31, 0.3, 0.2, 0.2], [0.7, 0.72, 0.2, 0.2], [0.5, 0.5, 0.1, 0.1]],
            scores: vec![0.5, 0.7, 0.4],
            labels: vec![0, 0, 0],
        };
        let mut b = a.clone();
        b.boxes.reverse();
        b.scores.reverse();
        b.labels.reverse();
        let ra = evaluate_ap(&[a], &gts, 1).unwrap();
        let rb = evaluate_ap(&[b], &gts, 1).unwrap();
        assert!((ra.ap - rb.ap).abs() < 1e-12);
    }

    #[test]
    fn classes_without_ground_truth_are_skipped() {
        let gts = vec![gt(vec![[0.3, 0.3, 0.2, 0.2]], vec![1])];
        let preds = vec![ScoredBoxes {
            boxes: vec![[0.3, 0.3, 0.2, 0.2], [0.8, 0.8, 0.1, 0.1]],
            scores: vec![0.9, 0.95],
            labels: vec![1, 0],
        }];
        // class 0 has no ground truth so its false positive does not count
        assert_eq!(evaluate_ap(&preds, &gts, 2).unwrap().ap50, 1.0);
    }
}
