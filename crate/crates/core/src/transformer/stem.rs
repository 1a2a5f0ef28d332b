//! Small convolutional backbone: a stride-2 3x3 convolution followed by one
//! stride-2 3x3 stage per pyramid level, each stage projected to the model
//! width by a 1x1 convolution. Activations are kept in token layout
//! (row-major pixels, channels contiguous).

use rand::Rng;

use crate::error::{invalid, Result};
use crate::numerics::ops::{relu_backward_in_place, relu_in_place};
use crate::numerics::{LinearLayer, Scalar, Tensor};
use crate::stda::LevelShape;

/// 3x3 convolutions are stored as linear layers over `(ky, kx, channel)` patches.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStem<F> {
    pub input: LinearLayer<F>,
    pub stages: Vec<LinearLayer<F>>,
    pub projections: Vec<LinearLayer<F>>,
}

crate::impl_params!(ConvStem {
    input,
    stages,
    projections
});

#[derive(Debug, Clone)]
pub struct StemCache<F> {
    height: usize,
    width: usize,
    /// Patch matrix of every 3x3 convolution, input convolution first.
    cols: Vec<Vec<F>>,
    /// Post-ReLU output of every 3x3 convolution.
    activations: Vec<Vec<F>>,
}

/// Patches of a stride-2, padding-1, 3x3 convolution over an `[h, w, c]` map.
fn im2col<F: Scalar>(x: &[F], h: usize, w: usize, c: usize) -> Vec<F> {
    let (ho, wo) = (h / 2, w / 2);
    let mut cols = vec![F::zero(); ho * wo * 9 * c];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * 9 * c..(oy * wo + ox + 1) * 9 * c];
            for ky in 0..3 {
                let iy = (2 * oy + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (2 * ox + kx) as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst = (ky * 3 + kx) * c;
                    row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im<F: Scalar>(cols: &[F], h: usize, w: usize, c: usize) -> Vec<F> {
    let (ho, wo) = (h / 2, w / 2);
    let mut x = vec![F::zero(); h * w * c];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &cols[(oy * wo + ox) * 9 * c..(oy * wo + ox + 1) * 9 * c];
            for ky in 0..3 {
                let iy = (2 * oy + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (2 * ox + kx) as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    let src = (ky * 3 + kx) * c;
                    for i in 0..c {
                        x[dst + i] += row[src + i];
                    }
                }
            }
        }
    }
    x
}

impl<F: Scalar> ConvStem<F> {
    pub fn zeros(levels: usize, stem_channels: usize, channels: usize) -> Self {
        Self {
            input: LinearLayer::zeros(9, stem_channels),
            stages: (0..levels)
                .map(|_| LinearLayer::zeros(9 * stem_channels, stem_channels))
                .collect(),
            projections: (0..levels)
                .map(|_| LinearLayer::zeros(stem_channels, channels))
                .collect(),
        }
    }

    pub fn init(levels: usize, stem_channels: usize, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            input: LinearLayer::xavier(9, stem_channels, rng),
            stages: (0..levels)
                .map(|_| LinearLayer::xavier(9 * stem_channels, stem_channels, rng))
                .collect(),
            projections: (0..levels)
                .map(|_| LinearLayer::xavier(stem_channels, channels, rng))
                .collect(),
        }
    }

    pub fn levels(&self) -> usize {
        self.stages.len()
    }

    pub fn channels(&self) -> usize {
        self.projections[0].outputs()
    }

    /// Pyramid level shapes for an `h x w` frame.
    pub fn level_shapes(&self, h: usize, w: usize) -> Vec<LevelShape> {
        (0..self.levels())
            .map(|l| LevelShape::new(h >> (l + 2), w >> (l + 2)))
            .collect()
    }

    fn check_frame(&self, frame: &Tensor<F>) -> Result<(usize, usize)> {
        let d = frame.dims();
        let div = 1 << (self.levels() + 1);
        if d.len() != 3 || d[0] != 1 {
            return Err(invalid!("stem expects a [1, H, W] frame, got {d:?}"));
        }
        if !d[1].is_multiple_of(div) || !d[2].is_multiple_of(div) {
            return Err(invalid!(
                "frame {}x{} is not divisible by {div} for {} levels",
                d[1],
                d[2],
                self.levels()
            ));
        }
        Ok((d[1], d[2]))
    }

    /// Token-layout pyramid of one frame: levels concatenated, each `[H_l * W_l, C]`.
    pub fn forward_tokens(&self, frame: &Tensor<F>) -> Result<(Vec<F>, Vec<LevelShape>, StemCache<F>)> {
        let (h, w) = self.check_frame(frame)?;
        let s = self.input.outputs();
        let mut cols = Vec::with_capacity(self.levels() + 1);
        let mut activations = Vec::with_capacity(self.levels() + 1);

        let c0 = im2col(frame.data(), h, w, 1);
        let mut a = self.input.forward_rows(&c0, (h / 2) * (w / 2));
        relu_in_place(&mut a);
        cols.push(c0);
        activations.push(a);

        let mut out = Vec::new();
        let (mut ch, mut cw) = (h / 2, w / 2);
        for l in 0..self.levels() {
            let c = im2col(activations.last().unwrap(), ch, cw, s);
            ch /= 2;
            cw /= 2;
            let mut a = self.stages[l].forward_rows(&c, ch * cw);
            relu_in_place(&mut a);
            out.extend(self.projections[l].forward_rows(&a, ch * cw));
            cols.push(c);
            activations.push(a);
        }
        let levels = self.level_shapes(h, w);
        Ok((
            out,
            levels,
            StemCache {
                height: h,
                width: w,
                cols,
                activations,
            },
        ))
    }

    /// Accumulates parameter gradients given the gradient of the token pyramid.
    pub fn backward_tokens(&self, cache: &StemCache<F>, d_tokens: &[F], grad: &mut ConvStem<F>) -> Result<()> {
        let s = self.input.outputs();
        let c = self.channels();
        let levels = self.level_shapes(cache.height, cache.width);
        let total: usize = levels.iter().map(|lv| lv.area()).sum();
        if d_tokens.len() != total * c {
            return Err(invalid!(
                "stem gradient has {} values, expected {}",
                d_tokens.len(),
                total * c
            ));
        }
        let mut starts = Vec::with_capacity(levels.len());
        let mut acc = 0;
        for lv in &levels {
            starts.push(acc);
            acc += lv.area();
        }

        // gradient flowing into the post-ReLU activation of the next-deeper stage
        let mut d_act: Option<Vec<F>> = None;
        for l in (0..self.levels()).rev() {
            let area = levels[l].area();
            let act = &cache.activations[l + 1];
            let d_level = &d_tokens[starts[l] * c..(starts[l] + area) * c];
            let mut d = self.projections[l].backward(act, d_level, area, &mut grad.projections[l]);
            if let Some(prev) = d_act.take() {
                for (x, y) in d.iter_mut().zip(prev) {
                    *x += y;
                }
            }
            relu_backward_in_place(act, &mut d);
            let d_cols = self.stages[l].backward(&cache.cols[l + 1], &d, area, &mut grad.stages[l]);
            let (ih, iw) = (cache.height >> (l + 1), cache.width >> (l + 1));
            d_act = Some(col2im(&d_cols, ih, iw, s));
        }
        let mut d = d_act.expect("at least one level");
        relu_backward_in_place(&cache.activations[0], &mut d);
        let rows = (cache.height / 2) * (cache.width / 2);
        self.input.backward_params(&cache.cols[0], &d, rows, &mut grad.input);
        Ok(())
    }

    /// Pyramid of `[C, H_l, W_l]` maps for one `[1, H, W]` frame.
    pub fn forward(&self, frame: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
        let (tokens, levels, _) = self.forward_tokens(frame)?;
        let c = self.channels();
        let mut maps = Vec::with_capacity(levels.len());
        let mut offset = 0;
        for lv in levels {
            let area = lv.area();
            let chunk = &tokens[offset * c..(offset + area) * c];
            maps.push(Tensor::from_fn(&[c, lv.height, lv.width], |i| {
                let (ch, p) = (i / area, i % area);
                chunk[p * c + ch]
            }));
            offset += area;
        }
        Ok(maps)
    }
}
