use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::ops::{softmax_backward_row, softmax_in_place};
use crate::numerics::{axpy, dot, LinearLayer, Params, Scalar, Tensor};

use super::sampling::Footprint;
use super::{LevelShape, MultiScaleFeatures, QueryBatch, TokenFeatures};

/// Hyper-parameters fixing the tensor shapes of one STDA layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StdaShape {
    pub channels: usize,
    pub heads: usize,
    pub frames: usize,
    pub levels: usize,
    pub points: usize,
}

impl StdaShape {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.frames == 0 || self.levels == 0 || self.points == 0 {
            return Err(invalid!("STDA extents must be positive: {self:?}"));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(invalid!(
                "{} channels do not split into {} heads",
                self.channels,
                self.heads
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Sampling points per (query, head): frames x levels x points.
    pub fn samples_per_head(&self) -> usize {
        self.frames * self.levels * self.points
    }
}

/// Learnable weights of one spatial-temporal deformable attention layer.
///
/// `output_proj` is the concatenation of the per-head output projections.
#[derive(Debug, Clone, PartialEq)]
pub struct StdaParams<F> {
    shape: StdaShape,
    pub value_proj: LinearLayer<F>,
    pub offset_net: LinearLayer<F>,
    pub weight_net: LinearLayer<F>,
    pub output_proj: LinearLayer<F>,
}

crate::impl_params!(StdaParams {
    value_proj,
    offset_net,
    weight_net,
    output_proj
});

/// Gradients of one STDA call.
#[derive(Debug, Clone)]
pub struct StdaGradients<F> {
    pub params: StdaParams<F>,
    pub features: MultiScaleFeatures<F>,
    pub queries: Tensor<F>,
    pub ref_points: Tensor<F>,
}

/// Input gradients of a token-layout call.
#[derive(Debug, Clone)]
pub struct StdaInputGrads<F> {
    pub queries: Vec<F>,
    pub ref_points: Vec<F>,
    pub values: Vec<F>,
}

/// Everything the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct StdaCache<F> {
    shape: StdaShape,
    levels: Vec<LevelShape>,
    fingerprint: u64,
    n_queries: usize,
    queries: Vec<F>,
    ref_points: Vec<F>,
    value_src: TokenFeatures<F>,
    values: Vec<F>,
    offsets: Vec<F>,
    attention: Vec<F>,
    heads: Vec<F>,
}

impl<F: Scalar> StdaParams<F> {
    /// All-zero parameters.
    pub fn zeros(shape: StdaShape) -> Result<Self> {
        shape.validate()?;
        let c = shape.channels;
        let s = shape.heads * shape.samples_per_head();
        Ok(Self {
            shape,
            value_proj: LinearLayer::zeros(c, c),
            offset_net: LinearLayer::zeros(c, s * 2),
            weight_net: LinearLayer::zeros(c, s),
            output_proj: LinearLayer::zeros(c, c),
        })
    }

    /// Projections get fan-based uniform init. Offsets start as a one-pixel
    /// ring of `points` locations, rotated per head and replicated over
    /// frames and levels. Attention logits start at zero (uniform weights).
    pub fn init(shape: StdaShape, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        let c = shape.channels;
        p.value_proj = LinearLayer::xavier(c, c, rng);
        p.output_proj = LinearLayer::xavier(c, c, rng);
        let bias = p.offset_net.bias.data_mut();
        for m in 0..shape.heads {
            for t in 0..shape.frames {
                for l in 0..shape.levels {
                    for k in 0..shape.points {
                        let turn = k as f64 / shape.points as f64 + m as f64 / (shape.heads * shape.points) as f64;
                        let angle = std::f64::consts::TAU * turn;
                        let i = p.shape.offset_index(0, m, t, l, k);
                        bias[i] = F::of(angle.cos());
                        bias[i + 1] = F::of(angle.sin());
                    }
                }
            }
        }
        Ok(p)
    }

    /// Every weight and bias drawn from `U(-scale, scale)`; offset-net
    /// outputs are additionally stretched by `offset_pixels` so samples land
    /// a few pixels away from the reference point. Used by verification suites.
    pub fn random(shape: StdaShape, scale: f64, offset_pixels: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        p.visit_mut("", &mut |_, t| {
            for v in t.data_mut() {
                *v = F::of(rng.random_range(-scale..scale));
            }
        });
        for v in p
            .offset_net
            .weight
            .data_mut()
            .iter_mut()
            .chain(p.offset_net.bias.data_mut())
        {
            *v *= F::of(offset_pixels);
        }
        Ok(p)
    }

    pub fn shape(&self) -> StdaShape {
        self.shape
    }

    fn check_queries(&self, channels: usize) -> Result<()> {
        if channels != self.shape.channels {
            return Err(invalid!(
                "queries carry {channels} channels, STDA layer expects {}",
                self.shape.channels
            ));
        }
        Ok(())
    }

    /// Raw offsets `[N_q, M, T, L, K, 2]` in level-pixel units.
    pub fn predict_offsets(&self, queries: &QueryBatch<F>) -> Result<Tensor<F>> {
        self.check_queries(queries.channels())?;
        let s = self.shape;
        let raw = self.offset_net.forward(&queries.features)?;
        raw.reshape(vec![queries.len(), s.heads, s.frames, s.levels, s.points, 2])
    }

    /// Attention weights `[N_q, M, T, L, K]`, normalized jointly over
    /// `T x L x K` for every (query, head).
    pub fn predict_attention_weights(&self, queries: &QueryBatch<F>) -> Result<Tensor<F>> {
        self.check_queries(queries.channels())?;
        let s = self.shape;
        let mut logits = self.weight_net.forward_rows(queries.features.data(), queries.len());
        for chunk in logits.chunks_mut(s.samples_per_head()) {
            softmax_in_place(chunk);
        }
        Tensor::new(vec![queries.len(), s.heads, s.frames, s.levels, s.points], logits)
    }

    pub fn forward(&self, queries: &QueryBatch<F>, feats: &MultiScaleFeatures<F>) -> Result<(Tensor<F>, StdaCache<F>)> {
        let tokens = TokenFeatures::from_pyramids(feats);
        let (out, cache) = self.forward_tokens(
            queries.features.data(),
            queries.ref_points.data(),
            queries.len(),
            &tokens,
        )?;
        Ok((Tensor::new(vec![queries.len(), self.shape.channels], out)?, cache))
    }

    pub fn backward(&self, cache: StdaCache<F>, d_out: &Tensor<F>) -> Result<StdaGradients<F>> {
        let mut params = Self::zeros(self.shape)?;
        let grads = self.backward_tokens(&cache, d_out.data(), &mut params)?;
        let n = cache.n_queries;
        Ok(StdaGradients {
            params,
            features: cache.value_src.with_data(grads.values)?.to_pyramids(),
            queries: Tensor::new(vec![n, self.shape.channels], grads.queries)?,
            ref_points: Tensor::new(vec![n, 2], grads.ref_points)?,
        })
    }

    /// Forward over token-layout values. `queries` is `[n, C]` and
    /// `ref_points` is `[n, 2]`, both row-major.
    pub fn forward_tokens(
        &self,
        queries: &[F],
        ref_points: &[F],
        n: usize,
        value_src: &TokenFeatures<F>,
    ) -> Result<(Vec<F>, StdaCache<F>)> {
        let s = self.shape;
        let c = s.channels;
        if queries.len() != n * c || ref_points.len() != n * 2 {
            return Err(invalid!(
                "expected {n} queries of {c} channels with 2-D reference points"
            ));
        }
        if value_src.channels() != c || value_src.num_frames() != s.frames || value_src.num_levels() != s.levels {
            return Err(invalid!(
                "features have {} frames, {} levels, {} channels; layer expects {}, {}, {}",
                value_src.num_frames(),
                value_src.num_levels(),
                value_src.channels(),
                s.frames,
                s.levels,
                c
            ));
        }
        let values = self.value_proj.forward_rows(value_src.data(), value_src.num_tokens());
        let offsets = self.offset_net.forward_rows(queries, n);
        let mut attention = self.weight_net.forward_rows(queries, n);
        let per_head = s.samples_per_head();
        for chunk in attention.chunks_mut(per_head) {
            softmax_in_place(chunk);
        }

        let d = s.head_dim();
        let levels = value_src.levels().to_vec();
        let mut heads = vec![F::zero(); n * c];
        for q in 0..n {
            let (px, py) = (ref_points[2 * q], ref_points[2 * q + 1]);
            for m in 0..s.heads {
                let acc = &mut heads[q * c + m * d..q * c + (m + 1) * d];
                for t in 0..s.frames {
                    for (l, &lv) in levels.iter().enumerate() {
                        let (bx, by) = super::normalize_to_level((px, py), lv);
                        let first = value_src.token_index(t, l, 0);
                        for k in 0..s.points {
                            let oi = s.offset_index(q, m, t, l, k);
                            let a = attention[s.weight_index(q, m, t, l, k)];
                            let fp = Footprint::new(bx + offsets[oi], by + offsets[oi + 1], lv);
                            for (pix, w) in fp.pixel.iter().zip(fp.weight) {
                                if let Some(p) = pix {
                                    let tok = (first + p) * c + m * d;
                                    axpy(a * w, &values[tok..tok + d], acc);
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = self.output_proj.forward_rows(&heads, n);
        let cache = StdaCache {
            shape: s,
            levels,
            fingerprint: self.fingerprint(),
            n_queries: n,
            queries: queries.to_vec(),
            ref_points: ref_points.to_vec(),
            value_src: value_src.clone(),
            values,
            offsets,
            attention,
            heads,
        };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients into `grad` and returns input gradients.
    pub fn backward_tokens(
        &self,
        cache: &StdaCache<F>,
        d_out: &[F],
        grad: &mut StdaParams<F>,
    ) -> Result<StdaInputGrads<F>> {
        let s = self.shape;
        if cache.shape != s || cache.fingerprint != self.fingerprint() {
            return Err(invalid!("STDA cache was produced by different parameters"));
        }
        if grad.shape != s {
            return Err(invalid!("gradient buffer shape {:?} differs from {:?}", grad.shape, s));
        }
        let (n, c, d) = (cache.n_queries, s.channels, s.head_dim());
        if d_out.len() != n * c {
            return Err(invalid!(
                "output gradient has {} values, expected {}",
                d_out.len(),
                n * c
            ));
        }
        let d_heads = self.output_proj.backward(&cache.heads, d_out, n, &mut grad.output_proj);

        let src = &cache.value_src;
        let values = &cache.values;
        let mut d_values = vec![F::zero(); values.len()];
        let mut d_offsets = vec![F::zero(); cache.offsets.len()];
        let mut d_attention = vec![F::zero(); cache.attention.len()];
        let mut d_ref = vec![F::zero(); n * 2];
        for q in 0..n {
            let (px, py) = (cache.ref_points[2 * q], cache.ref_points[2 * q + 1]);
            for m in 0..s.heads {
                let dh = &d_heads[q * c + m * d..q * c + (m + 1) * d];
                for t in 0..s.frames {
                    for (l, &lv) in cache.levels.iter().enumerate() {
                        let (bx, by) = super::normalize_to_level((px, py), lv);
                        let first = src.token_index(t, l, 0);
                        for k in 0..s.points {
                            let oi = s.offset_index(q, m, t, l, k);
                            let wi = s.weight_index(q, m, t, l, k);
                            let a = cache.attention[wi];
                            let fp = Footprint::new(bx + cache.offsets[oi], by + cache.offsets[oi + 1], lv);
                            let mut g = [F::zero(); 4];
                            let mut sampled = F::zero();
                            for (corner, pix) in fp.pixel.iter().enumerate() {
                                if let Some(p) = pix {
                                    let tok = (first + p) * c + m * d;
                                    g[corner] = dot(dh, &values[tok..tok + d]);
                                    sampled += fp.weight[corner] * g[corner];
                                    axpy(a * fp.weight[corner], dh, &mut d_values[tok..tok + d]);
                                }
                            }
                            d_attention[wi] = sampled;
                            let (gx, gy) = fp.spatial_grad(g);
                            d_offsets[oi] = a * gx;
                            d_offsets[oi + 1] = a * gy;
                            d_ref[2 * q] += a * gx * F::of(lv.width as f64);
                            d_ref[2 * q + 1] += a * gy * F::of(lv.height as f64);
                        }
                    }
                }
            }
        }

        let per_head = s.samples_per_head();
        let mut d_logits = vec![F::zero(); d_attention.len()];
        for ((y, dy), dx) in cache
            .attention
            .chunks(per_head)
            .zip(d_attention.chunks(per_head))
            .zip(d_logits.chunks_mut(per_head))
        {
            softmax_backward_row(y, dy, dx);
        }
        let mut d_queries = self
            .weight_net
            .backward(&cache.queries, &d_logits, n, &mut grad.weight_net);
        let d_q_offsets = self
            .offset_net
            .backward(&cache.queries, &d_offsets, n, &mut grad.offset_net);
        axpy(F::one(), &d_q_offsets, &mut d_queries);
        let d_src = self
            .value_proj
            .backward(src.data(), &d_values, src.num_tokens(), &mut grad.value_proj);
        Ok(StdaInputGrads {
            queries: d_queries,
            ref_points: d_ref,
            values: d_src,
        })
    }

    fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        self.visit("", &mut |_, t| {
            for v in t.data() {
                h = (h ^ v.as_f64().to_bits()).wrapping_mul(0x0100_0000_01b3);
            }
        });
        h
    }
}

impl StdaShape {
    #[inline]
    pub(crate) fn weight_index(&self, q: usize, m: usize, t: usize, l: usize, k: usize) -> usize {
        (((q * self.heads + m) * self.frames + t) * self.levels + l) * self.points + k
    }

    #[inline]
    pub(crate) fn offset_index(&self, q: usize, m: usize, t: usize, l: usize, k: usize) -> usize {
        2 * self.weight_index(q, m, t, l, k)
    }
}

pub fn predict_offsets<F: Scalar>(params: &StdaParams<F>, queries: &QueryBatch<F>) -> Result<Tensor<F>> {
    params.predict_offsets(queries)
}

pub fn predict_attention_weights<F: Scalar>(params: &StdaParams<F>, queries: &QueryBatch<F>) -> Result<Tensor<F>> {
    params.predict_attention_weights(queries)
}

pub fn stda_forward<F: Scalar>(
    params: &StdaParams<F>,
    queries: &QueryBatch<F>,
    feats: &MultiScaleFeatures<F>,
) -> Result<(Tensor<F>, StdaCache<F>)> {
    params.forward(queries, feats)
}

pub fn stda_backward<F: Scalar>(
    params: &StdaParams<F>,
    cache: StdaCache<F>,
    d_out: &Tensor<F>,
) -> Result<StdaGradients<F>> {
    params.backward(cache, d_out)
}
