use crate::error::{invalid, Result};
use crate::numerics::{Scalar, Tensor};

/// Spatial extent of one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LevelShape {
    pub height: usize,
    pub width: usize,
}

impl LevelShape {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Per-frame multi-scale feature pyramids, each map `[C, H_l, W_l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleFeatures<F> {
    frames: Vec<Vec<Tensor<F>>>,
}

impl<F: Scalar> MultiScaleFeatures<F> {
    pub fn new(frames: Vec<Vec<Tensor<F>>>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| invalid!("need at least one frame"))?;
        if first.is_empty() {
            return Err(invalid!("need at least one pyramid level"));
        }
        let signature: Vec<&[usize]> = first.iter().map(|m| m.dims()).collect();
        let channels = signature[0].first().copied().unwrap_or(0);
        for (l, dims) in signature.iter().enumerate() {
            if dims.len() != 3 || dims[0] != channels {
                return Err(invalid!(
                    "level {l} map has shape {dims:?}, expected [{channels}, H, W]"
                ));
            }
        }
        for (t, pyramid) in frames.iter().enumerate().skip(1) {
            let sig: Vec<&[usize]> = pyramid.iter().map(|m| m.dims()).collect();
            if sig != signature {
                return Err(invalid!("frame {t} pyramid {sig:?} differs from frame 0 {signature:?}"));
            }
        }
        Ok(Self { frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_levels(&self) -> usize {
        self.frames[0].len()
    }

    pub fn channels(&self) -> usize {
        self.frames[0][0].dims()[0]
    }

    pub fn level_shapes(&self) -> Vec<LevelShape> {
        self.frames[0]
            .iter()
            .map(|m| LevelShape::new(m.dims()[1], m.dims()[2]))
            .collect()
    }

    pub fn frame(&self, t: usize) -> &[Tensor<F>] {
        &self.frames[t]
    }

    pub fn map(&self, t: usize, l: usize) -> &Tensor<F> {
        &self.frames[t][l]
    }

    pub fn into_frames(self) -> Vec<Vec<Tensor<F>>> {
        self.frames
    }

    pub fn is_finite(&self) -> bool {
        self.frames.iter().flatten().all(Tensor::is_finite)
    }
}

/// Token-major layout of [`MultiScaleFeatures`]: frame, then level, then
/// row-major pixel, each token holding `C` contiguous channels.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures<F> {
    frames: usize,
    channels: usize,
    levels: Vec<LevelShape>,
    level_start: Vec<usize>,
    tokens_per_frame: usize,
    data: Vec<F>,
}

impl<F: Scalar> TokenFeatures<F> {
    pub fn new(frames: usize, channels: usize, levels: Vec<LevelShape>, data: Vec<F>) -> Result<Self> {
        if frames == 0 || channels == 0 || levels.is_empty() {
            return Err(invalid!("token features need frames, channels and levels"));
        }
        let mut level_start = Vec::with_capacity(levels.len());
        let mut total = 0;
        for lv in &levels {
            if lv.area() == 0 {
                return Err(invalid!("empty pyramid level {lv:?}"));
            }
            level_start.push(total);
            total += lv.area();
        }
        if data.len() != frames * total * channels {
            return Err(invalid!(
                "token buffer has {} values, expected {}",
                data.len(),
                frames * total * channels
            ));
        }
        Ok(Self {
            frames,
            channels,
            levels,
            level_start,
            tokens_per_frame: total,
            data,
        })
    }

    pub fn zeros(frames: usize, channels: usize, levels: Vec<LevelShape>) -> Self {
        let total: usize = levels.iter().map(LevelShape::area).sum();
        Self::new(frames, channels, levels, vec![F::zero(); frames * total * channels]).expect("valid token layout")
    }

    pub fn from_pyramids(feats: &MultiScaleFeatures<F>) -> Self {
        let c = feats.channels();
        let levels = feats.level_shapes();
        let mut out = Self::zeros(feats.num_frames(), c, levels.clone());
        for t in 0..feats.num_frames() {
            for (l, lv) in levels.iter().enumerate() {
                let map = feats.map(t, l).data();
                let hw = lv.area();
                let base = out.token_index(t, l, 0);
                for p in 0..hw {
                    let tok = &mut out.data[(base + p) * c..(base + p + 1) * c];
                    for (ch, v) in tok.iter_mut().enumerate() {
                        *v = map[ch * hw + p];
                    }
                }
            }
        }
        out
    }

    pub fn to_pyramids(&self) -> MultiScaleFeatures<F> {
        let c = self.channels;
        let frames = (0..self.frames)
            .map(|t| {
                self.levels
                    .iter()
                    .enumerate()
                    .map(|(l, lv)| {
                        let hw = lv.area();
                        let base = self.token_index(t, l, 0);
                        Tensor::from_fn(&[c, lv.height, lv.width], |i| {
                            let (ch, p) = (i / hw, i % hw);
                            self.data[(base + p) * c + ch]
                        })
                    })
                    .collect()
            })
            .collect();
        MultiScaleFeatures::new(frames).expect("consistent pyramids")
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn levels(&self) -> &[LevelShape] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    pub fn num_tokens(&self) -> usize {
        self.frames * self.tokens_per_frame
    }

    pub fn level_start(&self, l: usize) -> usize {
        self.level_start[l]
    }

    /// Global token index of pixel `p` (row-major) on level `l` of frame `t`.
    #[inline]
    pub fn token_index(&self, t: usize, l: usize, p: usize) -> usize {
        t * self.tokens_per_frame + self.level_start[l] + p
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn frame_data(&self, t: usize) -> &[F] {
        let n = self.tokens_per_frame * self.channels;
        &self.data[t * n..(t + 1) * n]
    }

    /// Same layout with a different buffer.
    pub fn with_data(&self, data: Vec<F>) -> Result<Self> {
        Self::new(self.frames, self.channels, self.levels.clone(), data)
    }

    /// New features whose frame `i` is frame `order[i]` of `self`.
    pub fn permute_frames(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.frames];
        if order.len() != self.frames {
            return Err(invalid!(
                "frame order {order:?} has wrong length for {} frames",
                self.frames
            ));
        }
        for &o in order {
            if o >= self.frames || std::mem::replace(&mut seen[o], true) {
                return Err(invalid!("{order:?} is not a permutation of {} frames", self.frames));
            }
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &o in order {
            data.extend_from_slice(self.frame_data(o));
        }
        self.with_data(data)
    }

    /// Concatenates single-frame features along the frame axis.
    pub fn stack(frames: Vec<TokenFeatures<F>>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| invalid!("nothing to stack"))?;
        let (c, levels) = (first.channels, first.levels.clone());
        let mut data = Vec::new();
        let mut count = 0;
        for f in &frames {
            if f.channels != c || f.levels != levels {
                return Err(invalid!("stacked features disagree in layout"));
            }
            data.extend_from_slice(&f.data);
            count += f.frames;
        }
        Self::new(count, c, levels, data)
    }

    /// Normalized pixel-center `(x, y)` of every token of one frame.
    pub fn reference_points(&self) -> Vec<F> {
        let mut refs = Vec::with_capacity(self.tokens_per_frame * 2);
        for lv in &self.levels {
            for y in 0..lv.height {
                for x in 0..lv.width {
                    refs.push(F::of((x as f64 + 0.5) / lv.width as f64));
                    refs.push(F::of((y as f64 + 0.5) / lv.height as f64));
                }
            }
        }
        refs
    }

    /// Level index of every token of one frame.
    pub fn token_levels(&self) -> Vec<usize> {
        self.levels
            .iter()
            .enumerate()
            .flat_map(|(l, lv)| std::iter::repeat_n(l, lv.area()))
            .collect()
    }
}

/// Query feature vectors with their normalized `(x, y)` reference points.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch<F> {
    pub features: Tensor<F>,
    pub ref_points: Tensor<F>,
}

impl<F: Scalar> QueryBatch<F> {
    pub fn new(features: Tensor<F>, ref_points: Tensor<F>) -> Result<Self> {
        if features.rank() != 2 || ref_points.rank() != 2 || ref_points.dims()[1] != 2 {
            return Err(invalid!(
                "queries need features [N, C] and reference points [N, 2], got {:?} and {:?}",
                features.dims(),
                ref_points.dims()
            ));
        }
        if features.dims()[0] != ref_points.dims()[0] {
            return Err(invalid!("query count differs between features and reference points"));
        }
        if let Some(v) = ref_points
            .data()
            .iter()
            .find(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0))
        {
            return Err(invalid!("reference point component {v} outside [0, 1]"));
        }
        Ok(Self { features, ref_points })
    }

    pub fn len(&self) -> usize {
        self.features.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.features.dims()[1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MultiScaleFeatures<f64> {
        let frames = (0..2)
            .map(|t| {
                vec![
                    Tensor::from_fn(&[3, 2, 4], |i| (t * 100 + i) as f64),
                    Tensor::from_fn(&[3, 1, 2], |i| (t * 100 + 50 + i) as f64),
                ]
            })
            .collect();
        MultiScaleFeatures::new(frames).unwrap()
    }

    #[test]
    fn pyramid_token_round_trip() {
        let feats = sample();
        let tokens = TokenFeatures::from_pyramids(&feats);
        assert_eq!(tokens.tokens_per_frame(), 10);
        // channel 1 of pixel 5 on level 0, frame 1
        let idx = tokens.token_index(1, 0, 5);
        assert_eq!(tokens.data()[idx * 3 + 1], (100 + 8 + 5) as f64);
        assert_eq!(tokens.to_pyramids(), feats);
    }

    #[test]
    fn permutation_moves_whole_frames() {
        let tokens = TokenFeatures::from_pyramids(&sample());
        let swapped = tokens.permute_frames(&[1, 0]).unwrap();
        assert_eq!(swapped.frame_data(0), tokens.frame_data(1));
        assert!(tokens.permute_frames(&[0, 0]).is_err());
        assert!(tokens.permute_frames(&[0]).is_err());
    }

    #[test]
    fn rejects_inconsistent_frames() {
        let frames = vec![
            vec![Tensor::<f32>::zeros(&[2, 2, 2])],
            vec![Tensor::<f32>::zeros(&[2, 2, 3])],
        ];
        assert!(MultiScaleFeatures::new(frames).is_err());
        assert!(MultiScaleFeatures::<f32>::new(vec![]).is_err());
    }

    #[test]
    fn query_batch_validates_points() {
        let f = Tensor::<f32>::zeros(&[2, 4]);
        assert!(QueryBatch::new(f.clone(), Tensor::full(&[2, 2], 0.5)).is_ok());
        assert!(QueryBatch::new(f.clone(), Tensor::full(&[2, 2], 1.5)).is_err());
        assert!(QueryBatch::new(f, Tensor::full(&[3, 2], 0.5)).is_err());
    }
}
