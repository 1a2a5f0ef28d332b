use rand::Rng;

use crate::error::Result;
use crate::numerics::ops::{relu_backward_in_place, relu_in_place, LayerNormCache};
use crate::numerics::{axpy, LayerNorm, LinearLayer, Scalar};
use crate::stda::{StdaCache, StdaParams, StdaShape, TokenFeatures};

use super::attention::{SelfAttention, SelfAttentionCache};

/// Two-layer ReLU perceptron applied per token.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<F> {
    pub expand: LinearLayer<F>,
    pub contract: LinearLayer<F>,
}

crate::impl_params!(FeedForward { expand, contract });

#[derive(Debug, Clone)]
pub struct FeedForwardCache<F> {
    x: Vec<F>,
    hidden: Vec<F>,
}

impl<F: Scalar> FeedForward<F> {
    pub fn zeros(channels: usize, hidden: usize) -> Self {
        Self {
            expand: LinearLayer::zeros(channels, hidden),
            contract: LinearLayer::zeros(hidden, channels),
        }
    }

    pub fn init(channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            expand: LinearLayer::xavier(channels, hidden, rng),
            contract: LinearLayer::xavier(hidden, channels, rng),
        }
    }

    pub fn forward_rows(&self, x: &[F], rows: usize) -> (Vec<F>, FeedForwardCache<F>) {
        let mut hidden = self.expand.forward_rows(x, rows);
        relu_in_place(&mut hidden);
        let y = self.contract.forward_rows(&hidden, rows);
        (y, FeedForwardCache { x: x.to_vec(), hidden })
    }

    pub fn backward_rows(&self, cache: &FeedForwardCache<F>, dy: &[F], grad: &mut FeedForward<F>) -> Vec<F> {
        let rows = cache.hidden.len() / self.expand.outputs();
        let mut dh = self.contract.backward(&cache.hidden, dy, rows, &mut grad.contract);
        relu_backward_in_place(&cache.hidden, &mut dh);
        self.expand.backward(&cache.x, &dh, rows, &mut grad.expand)
    }
}

fn add<F: Scalar>(a: &[F], b: &[F]) -> Vec<F> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

/// STDA over all tokens, then a feed-forward block, each with a residual
/// connection and post-normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<F> {
    pub attention: StdaParams<F>,
    pub norm1: LayerNorm<F>,
    pub ffn: FeedForward<F>,
    pub norm2: LayerNorm<F>,
}

crate::impl_params!(EncoderLayer {
    attention,
    norm1,
    ffn,
    norm2
});

#[derive(Debug, Clone)]
pub struct EncoderLayerCache<F> {
    attention: StdaCache<F>,
    norm1: LayerNormCache<F>,
    ffn: FeedForwardCache<F>,
    norm2: LayerNormCache<F>,
}

impl<F: Scalar> EncoderLayer<F> {
    pub fn zeros(shape: StdaShape, hidden: usize) -> Result<Self> {
        Ok(Self {
            attention: StdaParams::zeros(shape)?,
            norm1: LayerNorm::new(shape.channels),
            ffn: FeedForward::zeros(shape.channels, hidden),
            norm2: LayerNorm::new(shape.channels),
        })
    }

    pub fn init(shape: StdaShape, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            attention: StdaParams::init(shape, rng)?,
            norm1: LayerNorm::new(shape.channels),
            ffn: FeedForward::init(shape.channels, hidden, rng),
            norm2: LayerNorm::new(shape.channels),
        })
    }

    /// `pos` is added to the tokens to form the queries; `refs` holds one
    /// normalized reference point per token.
    pub fn forward(
        &self,
        x: &TokenFeatures<F>,
        pos: &[F],
        refs: &[F],
    ) -> Result<(TokenFeatures<F>, EncoderLayerCache<F>)> {
        let n = x.num_tokens();
        let queries = add(x.data(), pos);
        let (attn, attn_cache) = self.attention.forward_tokens(&queries, refs, n, x)?;
        let (x1, norm1) = self.norm1.forward_rows(&add(x.data(), &attn));
        let (f, ffn) = self.ffn.forward_rows(&x1, n);
        let (x2, norm2) = self.norm2.forward_rows(&add(&x1, &f));
        Ok((
            x.with_data(x2)?,
            EncoderLayerCache {
                attention: attn_cache,
                norm1,
                ffn,
                norm2,
            },
        ))
    }

    /// Returns the gradients with respect to the tokens and to `pos`.
    pub fn backward(
        &self,
        cache: &EncoderLayerCache<F>,
        dy: &[F],
        grad: &mut EncoderLayer<F>,
    ) -> Result<(Vec<F>, Vec<F>)> {
        let mut dx1 = self.norm2.backward_rows(&cache.norm2, dy, &mut grad.norm2);
        let df = self.ffn.backward_rows(&cache.ffn, &dx1, &mut grad.ffn);
        axpy(F::one(), &df, &mut dx1);
        let d_sum = self.norm1.backward_rows(&cache.norm1, &dx1, &mut grad.norm1);
        let g = self
            .attention
            .backward_tokens(&cache.attention, &d_sum, &mut grad.attention)?;
        let mut dx = d_sum;
        axpy(F::one(), &g.values, &mut dx);
        axpy(F::one(), &g.queries, &mut dx);
        Ok((dx, g.queries))
    }
}

/// Self-attention among the object queries, STDA cross-attention into the
/// encoder memory, then a feed-forward block; residual plus norm after each.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<F> {
    pub self_attention: SelfAttention<F>,
    pub norm1: LayerNorm<F>,
    pub cross_attention: StdaParams<F>,
    pub norm2: LayerNorm<F>,
    pub ffn: FeedForward<F>,
    pub norm3: LayerNorm<F>,
}

crate::impl_params!(DecoderLayer {
    self_attention,
    norm1,
    cross_attention,
    norm2,
    ffn,
    norm3
});

#[derive(Debug, Clone)]
pub struct DecoderLayerCache<F> {
    self_attention: SelfAttentionCache<F>,
    norm1: LayerNormCache<F>,
    cross_attention: StdaCache<F>,
    norm2: LayerNormCache<F>,
    ffn: FeedForwardCache<F>,
    norm3: LayerNormCache<F>,
}

/// Gradients leaving a decoder layer.
pub struct DecoderLayerGrads<F> {
    pub target: Vec<F>,
    pub ref_points: Vec<F>,
    pub memory: Vec<F>,
}

impl<F: Scalar> DecoderLayer<F> {
    pub fn zeros(shape: StdaShape, hidden: usize) -> Result<Self> {
        let c = shape.channels;
        Ok(Self {
            self_attention: SelfAttention::zeros(c, shape.heads)?,
            norm1: LayerNorm::new(c),
            cross_attention: StdaParams::zeros(shape)?,
            norm2: LayerNorm::new(c),
            ffn: FeedForward::zeros(c, hidden),
            norm3: LayerNorm::new(c),
        })
    }

    pub fn init(shape: StdaShape, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let c = shape.channels;
        Ok(Self {
            self_attention: SelfAttention::init(c, shape.heads, rng)?,
            norm1: LayerNorm::new(c),
            cross_attention: StdaParams::init(shape, rng)?,
            norm2: LayerNorm::new(c),
            ffn: FeedForward::init(c, hidden, rng),
            norm3: LayerNorm::new(c),
        })
    }

    pub fn forward(
        &self,
        target: &[F],
        refs: &[F],
        memory: &TokenFeatures<F>,
    ) -> Result<(Vec<F>, DecoderLayerCache<F>)> {
        let n = refs.len() / 2;
        let (sa, self_attention) = self.self_attention.forward_rows(target, n)?;
        let (t1, norm1) = self.norm1.forward_rows(&add(target, &sa));
        let (ca, cross_attention) = self.cross_attention.forward_tokens(&t1, refs, n, memory)?;
        let (t2, norm2) = self.norm2.forward_rows(&add(&t1, &ca));
        let (f, ffn) = self.ffn.forward_rows(&t2, n);
        let (t3, norm3) = self.norm3.forward_rows(&add(&t2, &f));
        Ok((
            t3,
            DecoderLayerCache {
                self_attention,
                norm1,
                cross_attention,
                norm2,
                ffn,
                norm3,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &DecoderLayerCache<F>,
        dy: &[F],
        grad: &mut DecoderLayer<F>,
    ) -> Result<DecoderLayerGrads<F>> {
        let mut dt2 = self.norm3.backward_rows(&cache.norm3, dy, &mut grad.norm3);
        let df = self.ffn.backward_rows(&cache.ffn, &dt2, &mut grad.ffn);
        axpy(F::one(), &df, &mut dt2);
        let mut dt1 = self.norm2.backward_rows(&cache.norm2, &dt2, &mut grad.norm2);
        let g = self
            .cross_attention
            .backward_tokens(&cache.cross_attention, &dt1, &mut grad.cross_attention)?;
        axpy(F::one(), &g.queries, &mut dt1);
        let mut dt = self.norm1.backward_rows(&cache.norm1, &dt1, &mut grad.norm1);
        let ds = self
            .self_attention
            .backward_rows(&cache.self_attention, &dt, &mut grad.self_attention);
        axpy(F::one(), &ds, &mut dt);
        Ok(DecoderLayerGrads {
            target: dt,
            ref_points: g.ref_points,
            memory: g.values,
        })
    }
}
