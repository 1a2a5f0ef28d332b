//! Two-phase training of the detector on synthetic videos and COCO-style evaluation.

mod config;
mod optim;

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::RunConfig;
pub use optim::{clip_grad_norm, AdamW, Sgd};

use crate::detection::{evaluate_ap, set_loss, ApReport, GroundTruth, LossWeights, ScoredBoxes};
use crate::error::{invalid, Error, Result};
use crate::inference::Predictor;
use crate::numerics::{Params, Scalar, Tensor};
use crate::synthdata::{clip_indices, video_seed, SyntheticVideo};
use crate::transformer::{save_checkpoint, Net};

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: u8,
    /// Mean set loss per training clip.
    pub loss: f64,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub seconds: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} phase={} loss={:.6} ap={:.6}",
            self.epoch, self.phase, self.loss, self.ap
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub net: Net<F>,
    pub epochs: Vec<EpochLog>,
    pub eval: ApReport,
}

/// Copies a network into single precision for inference.
pub fn to_f32<F: Scalar>(net: &Net<F>) -> Result<Net<f32>> {
    let mut out = Net::<f32>::zeros(*net.config())?;
    out.copy_from(net)?;
    Ok(out)
}

fn flip_frame(frame: &Tensor<f32>) -> Tensor<f32> {
    let w = *frame.dims().last().unwrap_or(&1);
    let mut out = frame.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// AP over every `stride`-th inner frame of the given videos, predicting
/// each frame from the clip centred on it.
pub fn evaluate(net: &Net<f32>, videos: &[SyntheticVideo], seed: u64, stride: usize) -> Result<ApReport> {
    if stride == 0 {
        return Err(invalid!("evaluation stride must be positive"));
    }
    let predictor = Predictor::new(net.clone(), seed);
    let mut preds: Vec<ScoredBoxes> = Vec::new();
    let mut gts: Vec<GroundTruth> = Vec::new();
    for v in videos {
        for k in (1..v.len().saturating_sub(1)).step_by(stride) {
            preds.push(predictor.full_infer(v, k)?.scored());
            gts.push(v.annotations[k].clone());
        }
    }
    evaluate_ap(&preds, &gts, net.config().num_classes)
}

/// Target frames of one epoch as `(video, k)` pairs in training order.
fn epoch_targets(videos: &[SyntheticVideo], per_video: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (vi, v) in videos.iter().enumerate() {
        let inner = v.len().saturating_sub(2);
        if per_video == 0 || per_video >= inner {
            out.extend((1..=inner).map(|k| (vi, k)));
        } else {
            out.extend(sample(rng, inner, per_video).into_iter().map(|i| (vi, i + 1)));
        }
    }
    out.shuffle(rng);
    out
}

/// Two-phase schedule: AdamW for `phase1_epochs`, then plain SGD for
/// `phase2_epochs`. Each epoch is followed by an evaluation on `test`;
/// with `checkpoints` set, the network is saved there after every epoch.
pub fn train<F: Scalar>(
    cfg: &RunConfig,
    train_set: &[SyntheticVideo],
    test_set: &[SyntheticVideo],
    checkpoints: Option<&Path>,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(invalid!("no training videos"));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(video_seed(cfg.seed, 0x1417));
    let mut net = Net::<F>::init(cfg.net, &mut init_rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(video_seed(cfg.seed, 0x7a11));
    let weights = LossWeights::default();
    let mut adam = AdamW::new(cfg.lr, cfg.weight_decay);
    let sgd = Sgd {
        lr: cfg.phase2_lr,
        weight_decay: cfg.weight_decay,
    };
    if let Some(dir) = checkpoints {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut epochs = Vec::new();
    let mut eval = ApReport::default();
    let mut step = 0usize;
    for epoch in 1..=cfg.total_epochs() {
        let phase = if epoch <= cfg.phase1_epochs { 1 } else { 2 };
        let start = Instant::now();
        let targets = epoch_targets(train_set, cfg.clips_per_video, &mut rng);
        let mut acc = net.zeros_like();
        let mut in_batch = 0;
        let mut total = 0.0;
        for (i, &(vi, k)) in targets.iter().enumerate() {
            let video = &train_set[vi];
            let idx = clip_indices(video.len(), k, cfg.net.frames, &mut rng)?;
            let flip = cfg.augment && rng.random_bool(0.5);
            let frames: Vec<Tensor<F>> = idx
                .iter()
                .map(|&j| {
                    let f = &video.frames[j];
                    if flip {
                        flip_frame(f).cast()
                    } else {
                        f.cast()
                    }
                })
                .collect();
            let target = if flip {
                video.annotations[k].flipped()
            } else {
                video.annotations[k].clone()
            };
            let refs: Vec<&Tensor<F>> = frames.iter().collect();
            let (det, cache) = net.forward_train(&refs)?;
            let loss = set_loss(&det, &target, &weights)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite {
                    index: step,
                    detail: format!("loss at epoch {epoch}, video {}, frame {k}", video.id),
                });
            }
            total += loss.total;
            let grad = net.backward(&cache, &loss.grad)?;
            acc.add_scaled(F::of(1.0 / cfg.batch_size as f64), &grad);
            in_batch += 1;
            if in_batch == cfg.batch_size || i + 1 == targets.len() {
                clip_grad_norm(&mut acc, cfg.grad_clip);
                if phase == 1 {
                    adam.step(&mut net, &acc);
                } else {
                    sgd.step(&mut net, &acc);
                }
                acc.fill_zero();
                in_batch = 0;
                step += 1;
            }
        }
        let single = to_f32(&net)?;
        if !test_set.is_empty() {
            eval = evaluate(&single, test_set, cfg.seed, cfg.eval_stride)?;
        }
        let entry = EpochLog {
            epoch,
            phase,
            loss: total / targets.len().max(1) as f64,
            ap: eval.ap,
            ap50: eval.ap50,
            ap75: eval.ap75,
            seconds: start.elapsed().as_secs_f64(),
        };
        log(&entry);
        epochs.push(entry);
        if let Some(dir) = checkpoints {
            save_checkpoint(&single, &dir.join(format!("epoch_{epoch}.stn1")))?;
        }
    }
    if let Some(dir) = checkpoints {
        save_checkpoint(&to_f32(&net)?, &dir.join("final.stn1"))?;
    }
    Ok(TrainOutcome { net, epochs, eval })
}
