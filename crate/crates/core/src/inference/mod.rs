//! Clip inference: the plain per-target path and encoder feature shuffle,
//! which runs the stem and encoder once for a neighbouring triple and the
//! decoder once per target frame.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::Detection;
use crate::error::{invalid, Result};
use crate::numerics::Tensor;
use crate::stda::TokenFeatures;
use crate::synthdata::{clip_indices, video_seed, SyntheticVideo};
use crate::transformer::Net;

/// Decoder input orderings for the targets `k-1`, `k` and `k+1`, as
/// indices into the canonical clip `(k-1, k, k+1, r1, r2, r3)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShufflePlan {
    pub orders: [Vec<usize>; 3],
}

impl ShufflePlan {
    /// The target moves to slot 1, the other two neighbours keep their
    /// temporal order in slots 0 and 2, random frames stay put.
    pub fn new(frames: usize) -> Result<Self> {
        if frames < 3 {
            return Err(invalid!(
                "feature shuffle needs at least 3 frames per clip, got {frames}"
            ));
        }
        let order = |head: [usize; 3]| head.into_iter().chain(3..frames).collect::<Vec<_>>();
        Ok(Self {
            orders: [order([1, 0, 2]), order([0, 1, 2]), order([0, 2, 1])],
        })
    }
}

/// Number of stem, encoder and decoder passes since the last reset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounts {
    pub stem: usize,
    pub encoder: usize,
    pub decoder: usize,
}

#[derive(Debug, Default)]
struct Counters {
    stem: AtomicUsize,
    encoder: AtomicUsize,
    decoder: AtomicUsize,
}

/// A network plus the seed that fixes each clip's random frames.
#[derive(Debug)]
pub struct Predictor {
    net: Net<f32>,
    seed: u64,
    counters: Counters,
}

impl Predictor {
    pub fn new(net: Net<f32>, seed: u64) -> Self {
        Self {
            net,
            seed,
            counters: Counters::default(),
        }
    }

    pub fn net(&self) -> &Net<f32> {
        &self.net
    }

    pub fn counts(&self) -> PassCounts {
        PassCounts {
            stem: self.counters.stem.load(Ordering::Relaxed),
            encoder: self.counters.encoder.load(Ordering::Relaxed),
            decoder: self.counters.decoder.load(Ordering::Relaxed),
        }
    }

    pub fn reset_counts(&self) {
        self.counters.stem.store(0, Ordering::Relaxed);
        self.counters.encoder.store(0, Ordering::Relaxed);
        self.counters.decoder.store(0, Ordering::Relaxed);
    }

    /// Frame indices of the clip centred on `k`. The random frames depend
    /// only on the predictor seed, the video and `k`.
    pub fn clip_for(&self, video: &SyntheticVideo, k: usize) -> Result<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(video_seed(self.seed ^ video.seed, k));
        clip_indices(video.len(), k, self.net.config().frames, &mut rng)
    }

    fn stem(&self, video: &SyntheticVideo, indices: &[usize]) -> Result<TokenFeatures<f32>> {
        let frames: Vec<&Tensor<f32>> = indices.iter().map(|&i| &video.frames[i]).collect();
        self.counters.stem.fetch_add(1, Ordering::Relaxed);
        self.net.stem_clip(&frames)
    }

    fn encode(&self, x: &TokenFeatures<f32>) -> Result<TokenFeatures<f32>> {
        self.counters.encoder.fetch_add(1, Ordering::Relaxed);
        self.net.encode(x)
    }

    fn decode(&self, memory: &TokenFeatures<f32>) -> Result<Detection<f32>> {
        self.counters.decoder.fetch_add(1, Ordering::Relaxed);
        self.net.decode(memory)
    }

    /// Detections for frame `k` from the clip centred on it.
    pub fn full_infer(&self, video: &SyntheticVideo, k: usize) -> Result<Detection<f32>> {
        let clip = self.clip_for(video, k)?;
        let memory = self.encode(&self.stem(video, &clip)?)?;
        self.decode(&memory)
    }

    /// Detections for frames `k-1`, `k` and `k+1` from one encoder pass
    /// over the clip centred on `k`.
    pub fn shuffle_infer(&self, video: &SyntheticVideo, k: usize) -> Result<[Detection<f32>; 3]> {
        let plan = ShufflePlan::new(self.net.config().frames)?;
        let clip = self.clip_for(video, k)?;
        let memory = self.encode(&self.stem(video, &clip)?)?;
        let first = self.decode(&memory.permute_frames(&plan.orders[0])?)?;
        let middle = self.decode(&memory)?;
        let last = self.decode(&memory.permute_frames(&plan.orders[2])?)?;
        Ok([first, middle, last])
    }

    /// Per-frame detections of a whole video. Frames without two
    /// neighbours are skipped and reported as `None`.
    pub fn infer_video(&self, video: &SyntheticVideo, shuffle: bool) -> Result<Vec<Option<Detection<f32>>>> {
        let n = video.len();
        let mut out: Vec<Option<Detection<f32>>> = vec![None; n];
        if !shuffle || self.net.config().frames < 3 {
            for (k, slot) in out.iter_mut().enumerate().take(n.saturating_sub(1)).skip(1) {
                *slot = Some(self.full_infer(video, k)?);
            }
            return Ok(out);
        }
        // centres 2, 5, 8, ... cover frames 1..; a final centre picks up the tail
        let mut k = 2;
        while k + 1 < n {
            let k_eff = k.min(n - 3);
            let dets = self.shuffle_infer(video, k_eff)?;
            for (i, d) in dets.into_iter().enumerate() {
                let f = k_eff - 1 + i;
                if f >= 1 && f + 1 < n && out[f].is_none() {
                    out[f] = Some(d);
                }
            }
            k += 3;
        }
        for (k, slot) in out.iter_mut().enumerate().take(n.saturating_sub(1)).skip(1) {
            if slot.is_none() {
                *slot = Some(self.full_infer(video, k)?);
            }
        }
        Ok(out)
    }
}

/// Largest absolute difference between two detections' probabilities and boxes.
pub fn divergence(a: &Detection<f32>, b: &Detection<f32>) -> f64 {
    let pa = a.class_probabilities();
    let pb = b.class_probabilities();
    let probs = pa.iter().zip(&pb).map(|(x, y)| (x - y).abs());
    let boxes = a
        .boxes
        .data()
        .iter()
        .zip(b.boxes.data())
        .map(|(x, y)| (*x as f64 - *y as f64).abs());
    probs.chain(boxes).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub fps_full: f64,
    pub fps_shuffle: f64,
    /// Median over repetitions of the per-repetition ratio `fps_shuffle / fps_full`.
    pub ratio: f64,
    pub triples: usize,
    pub repetitions: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Wall-clock frames per second of three `full_infer` calls against one
/// `shuffle_infer` call per neighbouring triple.
pub fn bench_compare(
    predictor: &Predictor,
    videos: &[SyntheticVideo],
    n_triples: usize,
    repetitions: usize,
) -> Result<BenchReport> {
    if n_triples < 10 {
        return Err(invalid!("the benchmark needs at least 10 triples, got {n_triples}"));
    }
    if repetitions == 0 {
        return Err(invalid!("the benchmark needs at least one repetition"));
    }
    let triples: Vec<(&SyntheticVideo, usize)> = videos
        .iter()
        .flat_map(|v| (2..v.len().saturating_sub(2)).step_by(3).map(move |k| (v, k)))
        .take(n_triples)
        .collect();
    if triples.len() < n_triples {
        return Err(invalid!(
            "videos only provide {} triples, {n_triples} requested",
            triples.len()
        ));
    }
    let run_full = || -> Result<()> {
        for &(v, k) in &triples {
            for t in k - 1..=k + 1 {
                std::hint::black_box(predictor.full_infer(v, t)?);
            }
        }
        Ok(())
    };
    let run_shuffle = || -> Result<()> {
        for &(v, k) in &triples {
            std::hint::black_box(predictor.shuffle_infer(v, k)?);
        }
        Ok(())
    };
    let (v, k) = triples[0];
    predictor.full_infer(v, k)?;
    predictor.shuffle_infer(v, k)?;

    let frames = (3 * n_triples) as f64;
    let (mut full, mut shuffle, mut ratios) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..repetitions {
        let start = Instant::now();
        run_full()?;
        let f = frames / start.elapsed().as_secs_f64();
        let start = Instant::now();
        run_shuffle()?;
        let s = frames / start.elapsed().as_secs_f64();
        full.push(f);
        shuffle.push(s);
        ratios.push(s / f);
    }
    Ok(BenchReport {
        fps_full: median(full),
        fps_shuffle: median(shuffle),
        ratio: median(ratios),
        triples: n_triples,
        repetitions,
    })
}
