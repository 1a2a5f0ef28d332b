use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detection::GroundTruth;
use crate::error::{invalid, Result};
use crate::numerics::Tensor;

use super::SyntheticVideo;

/// Frames fed to the network for target frame `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSample {
    pub center: usize,
    /// `k-1, k, k+1` followed by the random frames; just `k` for single-frame clips.
    pub indices: Vec<usize>,
    pub target: GroundTruth,
}

impl ClipSample {
    pub fn frames<'a>(&self, video: &'a SyntheticVideo) -> Vec<&'a Tensor<f32>> {
        self.indices.iter().map(|&i| &video.frames[i]).collect()
    }
}

/// Frame indices of a `frames`-frame clip centred on `k`: the neighbouring
/// triple, then `frames - 3` distinct random frames from outside the triple.
/// A single-frame clip is just `[k]`.
pub fn clip_indices(len: usize, k: usize, frames: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if k == 0 || k + 1 >= len {
        return Err(invalid!("centre frame {k} needs neighbours inside a {len}-frame video"));
    }
    match frames {
        1 => Ok(vec![k]),
        2 => Err(invalid!("clips hold 1 frame or at least 3")),
        _ => {
            let eligible: Vec<usize> = (0..len).filter(|&i| i + 1 < k || i > k + 1).collect();
            let extra = frames - 3;
            if extra > eligible.len() {
                return Err(invalid!(
                    "{extra} random frames requested but only {} are eligible",
                    eligible.len()
                ));
            }
            let mut out = vec![k - 1, k, k + 1];
            out.extend(sample(rng, eligible.len(), extra).into_iter().map(|i| eligible[i]));
            Ok(out)
        }
    }
}

/// The six-frame clip of the detector: three neighbours and three random frames.
pub fn sample_clip(video: &SyntheticVideo, k: usize, rng: &mut impl Rng) -> Result<ClipSample> {
    sample_clip_of(video, k, 6, rng)
}

pub fn sample_clip_of(video: &SyntheticVideo, k: usize, frames: usize, rng: &mut impl Rng) -> Result<ClipSample> {
    let indices = clip_indices(video.len(), k, frames, rng)?;
    Ok(ClipSample {
        center: k,
        indices,
        target: video.annotations[k].clone(),
    })
}
