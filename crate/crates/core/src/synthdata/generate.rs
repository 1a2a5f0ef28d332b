use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detection::{BoxCxCyWh, GroundTruth};
use crate::error::{invalid, Result};
use crate::numerics::Tensor;

pub const BENIGN: usize = 0;
pub const MALIGNANT: usize = 1;

const BACKGROUND_MEAN: f64 = 0.15;
const NOISE_SIGMA: f64 = 0.05;
const TEXTURE_AMPLITUDE: f64 = 0.03;
const FLICKER: f64 = 0.05;
const MAX_STEP: f64 = 0.04;
/// Keeps annotation boxes this far from the frame border.
const MARGIN: f64 = 0.02;
/// Profile is flat up to this normalized radius, then falls off to zero at 1.
const CORE_RADIUS: f64 = 0.8;

/// Rendering options shared by every video of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VideoOptions {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Probability that a frame has its lesions faded to near background.
    pub difficulty: f64,
}

impl Default for VideoOptions {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frames: 32,
            difficulty: 0.3,
        }
    }
}

impl VideoOptions {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 || !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) {
            return Err(invalid!(
                "frames must be at least 16x16 with sides divisible by 8, got {}x{}",
                self.height,
                self.width
            ));
        }
        if self.frames < 7 {
            return Err(invalid!("videos need at least 7 frames, got {}", self.frames));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(invalid!("difficulty must lie in [0, 1], got {}", self.difficulty));
        }
        Ok(())
    }
}

/// Grayscale clip with per-frame lesion annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub id: usize,
    pub seed: u64,
    /// `[1, H, W]` frames with values in `[0, 1]`.
    pub frames: Vec<Tensor<f32>>,
    pub annotations: Vec<GroundTruth>,
    /// Which frames were faded. Known only for freshly generated videos.
    pub occluded: Option<Vec<bool>>,
}

impl SyntheticVideo {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].dims()[1]
    }

    pub fn width(&self) -> usize {
        self.frames[0].dims()[2]
    }
}

/// Per-video seed derived from the dataset seed (splitmix64 of the pair).
pub fn video_seed(master: u64, id: usize) -> u64 {
    let mut z = master ^ (id as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Rounds to six significant digits, the precision of annotation files.
pub fn quantize(v: f64) -> f64 {
    format_sig6(v).parse().expect("formatted float parses")
}

/// Plain decimal with six significant digits.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    let decimals = (5 - exp).max(0) as usize;
    format!("{v:.decimals$}")
}

struct Lesion {
    class: usize,
    /// Semi-axes in normalized units.
    rx: f64,
    ry: f64,
    contrast: f64,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    /// Horizontal band the center stays in.
    band: (f64, f64),
}

impl Lesion {
    fn sample(rng: &mut ChaCha8Rng, band: (f64, f64)) -> Self {
        let class = if rng.random_bool(0.5) { MALIGNANT } else { BENIGN };
        let (rx, ry, contrast) = if class == BENIGN {
            let rx = rng.random_range(0.12..0.18);
            (rx, rx * rng.random_range(0.5..0.7), rng.random_range(0.45..0.55))
        } else {
            let r = rng.random_range(0.08..0.13);
            (r, r * rng.random_range(0.85..1.15), rng.random_range(0.65..0.8))
        };
        let mut l = Self {
            class,
            rx,
            ry,
            contrast,
            x: 0.0,
            y: 0.0,
            vx: rng.random_range(-0.02..0.02),
            vy: rng.random_range(-0.02..0.02),
            band,
        };
        let (x0, x1) = l.x_range();
        let (y0, y1) = l.y_range();
        l.x = rng.random_range(x0..x1);
        l.y = rng.random_range(y0..y1);
        l
    }

    fn x_range(&self) -> (f64, f64) {
        (self.band.0 + MARGIN + self.rx, self.band.1 - MARGIN - self.rx)
    }

    fn y_range(&self) -> (f64, f64) {
        (MARGIN + self.ry, 1.0 - MARGIN - self.ry)
    }

    /// Smooth random walk, reflected at the allowed range.
    fn step(&mut self, rng: &mut ChaCha8Rng) {
        self.vx += rng.random_range(-0.006..0.006);
        self.vy += rng.random_range(-0.006..0.006);
        let speed = (self.vx * self.vx + self.vy * self.vy).sqrt();
        if speed > MAX_STEP {
            self.vx *= MAX_STEP / speed;
            self.vy *= MAX_STEP / speed;
        }
        let reflect = |p: &mut f64, v: &mut f64, (lo, hi): (f64, f64)| {
            *p += *v;
            if *p < lo {
                *p = 2.0 * lo - *p;
                *v = -*v;
            }
            if *p > hi {
                *p = 2.0 * hi - *p;
                *v = -*v;
            }
            *p = p.clamp(lo, hi);
        };
        let (xr, yr) = (self.x_range(), self.y_range());
        reflect(&mut self.x, &mut self.vx, xr);
        reflect(&mut self.y, &mut self.vy, yr);
    }

    fn bbox(&self) -> BoxCxCyWh {
        [
            quantize(self.x),
            quantize(self.y),
            quantize(2.0 * self.rx),
            quantize(2.0 * self.ry),
        ]
    }
}

/// Intensity profile over the normalized elliptical radius: one in the core,
/// a cosine fall-off to zero at the rim, zero outside.
pub fn lesion_profile(r: f64) -> f64 {
    if r <= CORE_RADIUS {
        1.0
    } else if r >= 1.0 {
        0.0
    } else {
        let u = (r - CORE_RADIUS) / (1.0 - CORE_RADIUS);
        0.5 * (1.0 + (std::f64::consts::PI * u).cos())
    }
}

/// Renders one video. Each video has one lesion (75%) or two side by side;
/// class, size and brightness are fixed per lesion, the position drifts
/// smoothly and the brightness flickers per frame. With probability
/// `difficulty` a frame is occluded: every lesion drops to a contrast of
/// 0.03-0.07 over the background.
pub fn generate_video(seed: u64, opts: &VideoOptions) -> Result<SyntheticVideo> {
    opts.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (opts.height, opts.width);

    let mut lesions = if rng.random_bool(0.75) {
        vec![Lesion::sample(&mut rng, (0.0, 1.0))]
    } else {
        vec![
            Lesion::sample(&mut rng, (0.0, 0.5)),
            Lesion::sample(&mut rng, (0.5, 1.0)),
        ]
    };
    // low-frequency tissue texture: a few fixed plane waves
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(1.0..4.0) * std::f64::consts::TAU,
                rng.random_range(1.0..4.0) * std::f64::consts::TAU,
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");

    let mut frames = Vec::with_capacity(opts.frames);
    let mut annotations = Vec::with_capacity(opts.frames);
    let mut occluded = Vec::with_capacity(opts.frames);
    for f in 0..opts.frames {
        if f > 0 {
            for l in lesions.iter_mut() {
                l.step(&mut rng);
            }
        }
        let faded = rng.random::<f64>() < opts.difficulty;
        let contrasts: Vec<f64> = lesions
            .iter()
            .map(|l| {
                let flicker = rng.random_range(-FLICKER..FLICKER);
                if faded {
                    rng.random_range(0.03..0.07)
                } else {
                    l.contrast + flicker
                }
            })
            .collect();
        let mut data = Vec::with_capacity(h * w);
        for i in 0..h {
            let y = (i as f64 + 0.5) / h as f64;
            for j in 0..w {
                let x = (j as f64 + 0.5) / w as f64;
                let mut v = BACKGROUND_MEAN
                    + TEXTURE_AMPLITUDE / waves.len() as f64
                        * waves.iter().map(|&(a, b, p)| (a * x + b * y + p).sin()).sum::<f64>();
                for (l, &c) in lesions.iter().zip(&contrasts) {
                    let r = (((x - l.x) / l.rx).powi(2) + ((y - l.y) / l.ry).powi(2)).sqrt();
                    v += c * lesion_profile(r);
                }
                v += noise.sample(&mut rng);
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        frames.push(Tensor::new(vec![1, h, w], data)?);
        annotations.push(GroundTruth::new(
            lesions.iter().map(Lesion::bbox).collect(),
            lesions.iter().map(|l| l.class).collect(),
        )?);
        occluded.push(faded);
    }
    Ok(SyntheticVideo {
        id: 0,
        seed,
        frames,
        annotations,
        occluded: Some(occluded),
    })
}

/// `count` videos with ids `0..count`, each seeded by [`video_seed`].
pub fn generate_videos(master_seed: u64, count: usize, opts: &VideoOptions) -> Result<Vec<SyntheticVideo>> {
    (0..count)
        .map(|id| {
            let mut v = generate_video(video_seed(master_seed, id), opts)?;
            v.id = id;
            Ok(v)
        })
        .collect()
}

/// Mean intensity inside each annotated ellipse minus the mean of pixels
/// outside every annotation box. One value per lesion.
pub fn lesion_contrast(frame: &Tensor<f32>, gt: &GroundTruth) -> Vec<f64> {
    let (h, w) = (frame.dims()[1], frame.dims()[2]);
    let px = |i: usize, j: usize| frame.data()[i * w + j] as f64;
    let centre = |i: usize, j: usize| ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64);
    let (mut bg, mut bg_n) = (0.0, 0usize);
    for i in 0..h {
        for j in 0..w {
            let (x, y) = centre(i, j);
            let inside_any = gt
                .boxes
                .iter()
                .any(|b| (x - b[0]).abs() <= b[2] / 2.0 && (y - b[1]).abs() <= b[3] / 2.0);
            if !inside_any {
                bg += px(i, j);
                bg_n += 1;
            }
        }
    }
    let bg = bg / bg_n.max(1) as f64;
    gt.boxes
        .iter()
        .map(|b| {
            let (mut s, mut n) = (0.0, 0usize);
            for i in 0..h {
                for j in 0..w {
                    let (x, y) = centre(i, j);
                    let r = ((2.0 * (x - b[0]) / b[2]).powi(2) + (2.0 * (y - b[1]) / b[3]).powi(2)).sqrt();
                    if r < 1.0 {
                        s += px(i, j);
                        n += 1;
                    }
                }
            }
            s / n.max(1) as f64 - bg
        })
        .collect()
}
