use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::ops::softmax_in_place;
use crate::numerics::{Scalar, Tensor};

use super::boxes::giou_with_grad;
use super::hungarian::{hungarian_match, CostMatrix, Matching};
use super::{Detection, GroundTruth};

/// Coefficients of the matching cost and the set loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of `1 - p(class)` in the matching cost.
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    /// Down-weight of the "no object" cross-entropy on unmatched queries.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
            no_object: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SetLoss<F> {
    pub total: f64,
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub matching: Matching,
    /// Gradient of `total` with respect to the logits and boxes of the prediction.
    pub grad: Detection<F>,
}

fn probabilities(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

/// Matching cost `lambda_cls (1 - p_c) + lambda_l1 |b - g|_1 + lambda_giou (1 - GIoU)`.
pub fn matching_cost<F: Scalar>(pred: &Detection<F>, gt: &GroundTruth, w: &LossWeights) -> Result<CostMatrix> {
    let n = pred.num_queries();
    let g = gt.len();
    let mut data = Vec::with_capacity(n * g);
    for q in 0..n {
        let logits: Vec<f64> = pred.class_logits.row(q).iter().map(|v| v.as_f64()).collect();
        let probs = probabilities(&logits);
        let b = pred.box_at(q);
        for (gb, &label) in gt.boxes.iter().zip(&gt.labels) {
            let l1: f64 = b.iter().zip(gb).map(|(x, y)| (x - y).abs()).sum();
            let (gi, _) = giou_with_grad(&b, gb);
            data.push(w.class * (1.0 - probs[label]) + w.l1 * l1 + w.giou * (1.0 - gi));
        }
    }
    CostMatrix::new(n, g, data)
}

/// Hungarian-matched set loss with its gradient.
///
/// Matched queries pay cross-entropy against their object's class plus
/// `l1 * L1 + giou * (1 - GIoU)`; unmatched queries pay `no_object` times
/// the cross-entropy against the "no object" column.
pub fn set_loss<F: Scalar>(pred: &Detection<F>, gt: &GroundTruth, weights: &LossWeights) -> Result<SetLoss<F>> {
    let num_classes = pred.num_classes();
    gt.validate(num_classes)?;
    let matching = hungarian_match(&matching_cost(pred, gt, weights)?);
    let n = pred.num_queries();
    let width = num_classes + 1;
    let mut d_logits = vec![F::zero(); n * width];
    let mut d_boxes = vec![F::zero(); n * 4];
    let (mut class_loss, mut l1_loss, mut giou_loss) = (0.0, 0.0, 0.0);

    for q in 0..n {
        let logits: Vec<f64> = pred.class_logits.row(q).iter().map(|v| v.as_f64()).collect();
        let probs = probabilities(&logits);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let (target, scale) = match matching.gt_for_query(q) {
            Some(g) => (gt.labels[g], 1.0),
            None => (num_classes, weights.no_object),
        };
        class_loss += scale * (lse - logits[target]);
        for (c, &p) in probs.iter().enumerate() {
            let onehot = if c == target { 1.0 } else { 0.0 };
            d_logits[q * width + c] = F::of(scale * (p - onehot));
        }
        if let Some(g) = matching.gt_for_query(q) {
            let b = pred.box_at(q);
            let gb = &gt.boxes[g];
            let (gi, g_grad) = giou_with_grad(&b, gb);
            giou_loss += weights.giou * (1.0 - gi);
            for i in 0..4 {
                let diff = b[i] - gb[i];
                l1_loss += weights.l1 * diff.abs();
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                d_boxes[q * 4 + i] = F::of(weights.l1 * sign - weights.giou * g_grad[i]);
            }
        }
    }

    Ok(SetLoss {
        total: class_loss + l1_loss + giou_loss,
        class: class_loss,
        l1: l1_loss,
        giou: giou_loss,
        matching,
        grad: Detection {
            class_logits: Tensor::new(vec![n, width], d_logits)?,
            boxes: Tensor::new(vec![n, 4], d_boxes)?,
        },
    })
}

pub(crate) fn check_prediction<F: Scalar>(pred: &Detection<F>) -> Result<()> {
    let lg = pred.class_logits.dims();
    let bx = pred.boxes.dims();
    if lg.len() != 2 || bx.len() != 2 || bx[1] != 4 || lg[0] != bx[0] || lg[1] < 2 {
        return Err(invalid!("prediction shapes {lg:?} / {bx:?} are inconsistent"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::grad_check;

    fn random_pred(rng: &mut impl Rng, n: usize) -> Detection<f64> {
        Detection {
            class_logits: Tensor::from_fn(&[n, 3], |_| rng.random_range(-2.0..2.0)),
            boxes: Tensor::from_fn(&[n, 4], |i| {
                if i % 4 < 2 {
                    rng.random_range(0.2..0.8)
                } else {
                    rng.random_range(0.05..0.4)
                }
            }),
        }
    }

    fn two_objects() -> GroundTruth {
        GroundTruth::new(vec![[0.3, 0.4, 0.2, 0.3], [0.7, 0.6, 0.25, 0.2]], vec![0, 1]).unwrap()
    }

    #[test]
    fn empty_gt_uniform_logits() {
        let n = 5;
        let pred = Detection::<f64> {
            class_logits: Tensor::zeros(&[n, 3]),
            boxes: Tensor::full(&[n, 4], 0.5),
        };
        let loss = set_loss(&pred, &GroundTruth::empty(), &LossWeights::default()).unwrap();
        assert!((loss.total - 0.1 * n as f64 * 3f64.ln()).abs() < 1e-12);
        assert!(loss.matching.pairs.is_empty());
    }

    #[test]
    fn perfect_prediction_approaches_zero() {
        let gt = two_objects();
        let mut last = f64::INFINITY;
        for margin in [5.0, 10.0, 20.0, 40.0] {
            let mut logits = Tensor::zeros(&[3, 3]);
            logits[0] = margin; // query 0 -> class 0
            logits[3 + 1] = margin; // query 1 -> class 1
            logits[6 + 2] = margin; // query 2 -> no object
            let mut boxes = Tensor::full(&[3, 4], 0.5);
            boxes.row_mut(0).copy_from_slice(&gt.boxes[0]);
            boxes.row_mut(1).copy_from_slice(&gt.boxes[1]);
            boxes.row_mut(2).copy_from_slice(&[0.5, 0.5, 0.1, 0.1]);
            let pred = Detection {
                class_logits: logits,
                boxes,
            };
            let loss = set_loss(&pred, &gt, &LossWeights::default()).unwrap();
            assert!(loss.total < last);
            last = loss.total;
        }
        assert!(last < 1e-15, "{last}");
    }

    #[test]
    fn gt_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pred = random_pred(&mut rng, 6);
        let gt = two_objects();
        let flipped = GroundTruth::new(vec![gt.boxes[1], gt.boxes[0]], vec![1, 0]).unwrap();
        let a = set_loss(&pred, &gt, &LossWeights::default()).unwrap();
        let b = set_loss(&pred, &flipped, &LossWeights::default()).unwrap();
        assert!((a.total - b.total).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pred = random_pred(&mut rng, 5);
        let gt = two_objects();
        let w = LossWeights::default();
        let loss = set_loss(&pred, &gt, &w).unwrap();
        let r = grad_check(
            |t| {
                let p = Detection {
                    class_logits: t.clone(),
                    boxes: pred.boxes.clone(),
                };
                Ok(set_loss(&p, &gt, &w)?.total)
            },
            &pred.class_logits,
            &loss.grad.class_logits,
            1e-6,
            None,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "logits: {r:?}");
        let r = grad_check(
            |t| {
                let p = Detection {
                    class_logits: pred.class_logits.clone(),
                    boxes: t.clone(),
                };
                Ok(set_loss(&p, &gt, &w)?.total)
            },
            &pred.boxes,
            &loss.grad.boxes,
            1e-7,
            None,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "boxes: {r:?}");
    }
}
