use rand::Rng;
use rand_distr::StandardNormal;

use crate::detection::Detection;
use crate::error::{invalid, Result};
use crate::numerics::ops::{bounded_sigmoid, relu_backward_in_place, relu_in_place, sigmoid};
use crate::numerics::{LinearLayer, Params, Scalar, Tensor};
use crate::stda::{MultiScaleFeatures, TokenFeatures};

use super::layers::{DecoderLayer, DecoderLayerCache, EncoderLayer, EncoderLayerCache};
use super::stem::{ConvStem, StemCache};
use super::NetConfig;

/// The full detector: stem, encoder, decoder and prediction heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Net<F> {
    config: NetConfig,
    pub stem: ConvStem<F>,
    /// `[L, C]`, added to encoder queries by pyramid level.
    pub level_embed: Tensor<F>,
    pub encoder: Vec<EncoderLayer<F>>,
    /// `[N, C]` learnable object queries.
    pub query_embed: Tensor<F>,
    /// Predicts each query's reference point (before the sigmoid).
    pub reference: LinearLayer<F>,
    pub decoder: Vec<DecoderLayer<F>>,
    pub class_head: LinearLayer<F>,
    pub box_head: Vec<LinearLayer<F>>,
}

crate::impl_params!(Net {
    stem,
    level_embed,
    encoder,
    query_embed,
    reference,
    decoder,
    class_head,
    box_head
});

/// Per-frame pyramids after the encoder, same shapes as its input.
pub type EncoderOutput<F> = MultiScaleFeatures<F>;

#[derive(Debug, Clone)]
struct EncoderCache<F> {
    layers: Vec<EncoderLayerCache<F>>,
}

#[derive(Debug, Clone)]
struct DecoderCache<F> {
    refs: Vec<F>,
    layers: Vec<DecoderLayerCache<F>>,
    output: Vec<F>,
    box_hidden: [Vec<F>; 2],
    boxes: Vec<F>,
}

/// Intermediate values of a training forward pass.
#[derive(Debug, Clone)]
pub struct NetCache<F> {
    param_count: usize,
    stems: Vec<StemCache<F>>,
    memory_layout: TokenFeatures<F>,
    encoder: EncoderCache<F>,
    decoder: DecoderCache<F>,
}

impl<F: Scalar> Net<F> {
    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let shape = config.stda_shape();
        let c = config.channels;
        Ok(Self {
            config,
            stem: ConvStem::zeros(config.levels, config.stem_channels, c),
            level_embed: Tensor::zeros(&[config.levels, c]),
            encoder: (0..config.enc_layers)
                .map(|_| EncoderLayer::zeros(shape, config.ffn_hidden))
                .collect::<Result<_>>()?,
            query_embed: Tensor::zeros(&[config.queries, c]),
            reference: LinearLayer::zeros(c, 2),
            decoder: (0..config.dec_layers)
                .map(|_| DecoderLayer::zeros(shape, config.ffn_hidden))
                .collect::<Result<_>>()?,
            class_head: LinearLayer::zeros(c, config.num_classes + 1),
            box_head: vec![
                LinearLayer::zeros(c, c),
                LinearLayer::zeros(c, c),
                LinearLayer::zeros(c, 4),
            ],
        })
    }

    /// Fan-based uniform projections, unit-normal level and query embeddings,
    /// and a zero final box layer so initial boxes sit at the reference points.
    pub fn init(config: NetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let shape = config.stda_shape();
        let c = config.channels;
        let mut normal = |dims: &[usize]| Tensor::from_fn(dims, |_| F::of(rng.sample::<f64, _>(StandardNormal)));
        let level_embed = normal(&[config.levels, c]);
        let query_embed = normal(&[config.queries, c]);
        Ok(Self {
            config,
            stem: ConvStem::init(config.levels, config.stem_channels, c, rng),
            level_embed,
            encoder: (0..config.enc_layers)
                .map(|_| EncoderLayer::init(shape, config.ffn_hidden, rng))
                .collect::<Result<_>>()?,
            query_embed,
            reference: LinearLayer::xavier(c, 2, rng),
            decoder: (0..config.dec_layers)
                .map(|_| DecoderLayer::init(shape, config.ffn_hidden, rng))
                .collect::<Result<_>>()?,
            class_head: LinearLayer::xavier(c, config.num_classes + 1, rng),
            box_head: vec![
                LinearLayer::xavier(c, c, rng),
                LinearLayer::xavier(c, c, rng),
                LinearLayer::zeros(c, 4),
            ],
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Stem features of a clip in token layout, one frame after another.
    pub fn stem_clip(&self, frames: &[&Tensor<F>]) -> Result<TokenFeatures<F>> {
        Ok(self.stem_clip_cached(frames)?.0)
    }

    fn stem_clip_cached(&self, frames: &[&Tensor<F>]) -> Result<(TokenFeatures<F>, Vec<StemCache<F>>)> {
        if frames.len() != self.config.frames {
            return Err(invalid!(
                "clip has {} frames, network expects {}",
                frames.len(),
                self.config.frames
            ));
        }
        let mut data = Vec::new();
        let mut caches = Vec::with_capacity(frames.len());
        let mut layout = None;
        for f in frames {
            let (tokens, levels, cache) = self.stem.forward_tokens(f)?;
            match &layout {
                None => layout = Some(levels),
                Some(l) if *l != levels => return Err(invalid!("clip frames differ in size")),
                Some(_) => {}
            }
            data.extend(tokens);
            caches.push(cache);
        }
        let feats = TokenFeatures::new(frames.len(), self.config.channels, layout.unwrap(), data)?;
        Ok((feats, caches))
    }

    fn check_features(&self, x: &TokenFeatures<F>) -> Result<()> {
        let cfg = &self.config;
        if x.num_frames() != cfg.frames || x.num_levels() != cfg.levels || x.channels() != cfg.channels {
            return Err(invalid!(
                "features carry {} frames, {} levels, {} channels; network expects {}, {}, {}",
                x.num_frames(),
                x.num_levels(),
                x.channels(),
                cfg.frames,
                cfg.levels,
                cfg.channels
            ));
        }
        Ok(())
    }

    /// Level embedding per token and pixel-center reference points for every token.
    fn encoder_inputs(&self, x: &TokenFeatures<F>) -> (Vec<F>, Vec<F>) {
        let c = self.config.channels;
        let levels = x.token_levels();
        let refs_one = x.reference_points();
        let mut pos = Vec::with_capacity(x.num_tokens() * c);
        let mut refs = Vec::with_capacity(x.num_tokens() * 2);
        for _ in 0..x.num_frames() {
            for &l in &levels {
                pos.extend_from_slice(self.level_embed.row(l));
            }
            refs.extend_from_slice(&refs_one);
        }
        (pos, refs)
    }

    pub fn encode(&self, x: &TokenFeatures<F>) -> Result<TokenFeatures<F>> {
        Ok(self.encode_cached(x)?.0)
    }

    fn encode_cached(&self, x: &TokenFeatures<F>) -> Result<(TokenFeatures<F>, EncoderCache<F>)> {
        self.check_features(x)?;
        let (pos, refs) = self.encoder_inputs(x);
        let mut cur = x.clone();
        let mut layers = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let (next, cache) = layer.forward(&cur, &pos, &refs)?;
            layers.push(cache);
            cur = next;
        }
        Ok((cur, EncoderCache { layers }))
    }

    pub fn decode(&self, memory: &TokenFeatures<F>) -> Result<Detection<F>> {
        Ok(self.decode_cached(memory)?.0)
    }

    fn decode_cached(&self, memory: &TokenFeatures<F>) -> Result<(Detection<F>, DecoderCache<F>)> {
        self.check_features(memory)?;
        let (n, c) = (self.config.queries, self.config.channels);
        let ref_logits = self.reference.forward_rows(self.query_embed.data(), n);
        let refs: Vec<F> = ref_logits.iter().map(|&z| sigmoid(z)).collect();
        let mut target = self.query_embed.data().to_vec();
        let mut layers = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let (next, cache) = layer.forward(&target, &refs, memory)?;
            layers.push(cache);
            target = next;
        }
        let logits = self.class_head.forward_rows(&target, n);
        let mut h1 = self.box_head[0].forward_rows(&target, n);
        relu_in_place(&mut h1);
        let mut h2 = self.box_head[1].forward_rows(&h1, n);
        relu_in_place(&mut h2);
        let mut boxes = self.box_head[2].forward_rows(&h2, n);
        for q in 0..n {
            boxes[4 * q] += ref_logits[2 * q];
            boxes[4 * q + 1] += ref_logits[2 * q + 1];
        }
        for b in boxes.iter_mut() {
            *b = bounded_sigmoid(*b);
        }
        let det = Detection {
            class_logits: Tensor::new(vec![n, self.config.num_classes + 1], logits)?,
            boxes: Tensor::new(vec![n, 4], boxes.clone())?,
        };
        debug_assert_eq!(target.len(), n * c);
        Ok((
            det,
            DecoderCache {
                refs,
                layers,
                output: target,
                box_hidden: [h1, h2],
                boxes,
            },
        ))
    }

    /// Detections for the clip's supervised frame (slot 1 of the clip, or
    /// the only frame of a single-frame network).
    pub fn forward(&self, frames: &[&Tensor<F>]) -> Result<Detection<F>> {
        self.decode(&self.encode(&self.stem_clip(frames)?)?)
    }

    pub fn forward_train(&self, frames: &[&Tensor<F>]) -> Result<(Detection<F>, NetCache<F>)> {
        let (tokens, stems) = self.stem_clip_cached(frames)?;
        let (memory, encoder) = self.encode_cached(&tokens)?;
        let (det, decoder) = self.decode_cached(&memory)?;
        Ok((
            det,
            NetCache {
                param_count: self.num_params(),
                stems,
                memory_layout: memory,
                encoder,
                decoder,
            },
        ))
    }

    /// Gradient of a scalar loss with respect to every parameter, given
    /// the loss gradient with respect to the detections.
    pub fn backward(&self, cache: &NetCache<F>, d_det: &Detection<F>) -> Result<Net<F>> {
        let (n, c) = (self.config.queries, self.config.channels);
        if cache.param_count != self.num_params() || cache.decoder.layers.len() != self.decoder.len() {
            return Err(invalid!("cache was produced by a different network"));
        }
        if d_det.class_logits.dims() != [n, self.config.num_classes + 1] || d_det.boxes.dims() != [n, 4] {
            return Err(invalid!("detection gradient has the wrong shape"));
        }
        let mut grad = self.zeros_like();
        let dc = &cache.decoder;

        // heads
        let mut d_target = self
            .class_head
            .backward(&dc.output, d_det.class_logits.data(), n, &mut grad.class_head);
        let mut d_pre: Vec<F> = dc
            .boxes
            .iter()
            .zip(d_det.boxes.data())
            .map(|(&b, &g)| g * b * (F::one() - b))
            .collect();
        let mut d_ref_logits = vec![F::zero(); n * 2];
        for q in 0..n {
            d_ref_logits[2 * q] = d_pre[4 * q];
            d_ref_logits[2 * q + 1] = d_pre[4 * q + 1];
        }
        let mut d_h2 = self.box_head[2].backward(&dc.box_hidden[1], &d_pre, n, &mut grad.box_head[2]);
        relu_backward_in_place(&dc.box_hidden[1], &mut d_h2);
        let mut d_h1 = self.box_head[1].backward(&dc.box_hidden[0], &d_h2, n, &mut grad.box_head[1]);
        relu_backward_in_place(&dc.box_hidden[0], &mut d_h1);
        d_pre = self.box_head[0].backward(&dc.output, &d_h1, n, &mut grad.box_head[0]);
        for (a, b) in d_target.iter_mut().zip(&d_pre) {
            *a += *b;
        }

        // decoder
        let mut d_refs = vec![F::zero(); n * 2];
        let mut d_memory = vec![F::zero(); cache.memory_layout.data().len()];
        for (layer, (lc, g)) in self
            .decoder
            .iter()
            .zip(dc.layers.iter().zip(grad.decoder.iter_mut()))
            .rev()
        {
            let lg = layer.backward(lc, &d_target, g)?;
            d_target = lg.target;
            for (a, b) in d_refs.iter_mut().zip(&lg.ref_points) {
                *a += *b;
            }
            for (a, b) in d_memory.iter_mut().zip(&lg.memory) {
                *a += *b;
            }
        }
        for i in 0..n * 2 {
            let r = dc.refs[i];
            d_ref_logits[i] += d_refs[i] * r * (F::one() - r);
        }
        let d_query = self
            .reference
            .backward(self.query_embed.data(), &d_ref_logits, n, &mut grad.reference);
        for ((g, a), b) in grad.query_embed.data_mut().iter_mut().zip(&d_target).zip(&d_query) {
            *g += *a + *b;
        }
        debug_assert_eq!(d_target.len(), n * c);

        // encoder
        let layout = &cache.memory_layout;
        let token_levels = layout.token_levels();
        let tpf = layout.tokens_per_frame();
        let mut d_x = d_memory;
        for (layer, (lc, g)) in self
            .encoder
            .iter()
            .zip(cache.encoder.layers.iter().zip(grad.encoder.iter_mut()))
            .rev()
        {
            let (dx, d_pos) = layer.backward(lc, &d_x, g)?;
            for (tok, row) in d_pos.chunks(c).enumerate() {
                let l = token_levels[tok % tpf];
                for (e, v) in grad.level_embed.row_mut(l).iter_mut().zip(row) {
                    *e += *v;
                }
            }
            d_x = dx;
        }

        // stem, frame by frame
        for (t, sc) in cache.stems.iter().enumerate() {
            self.stem
                .backward_tokens(sc, &d_x[t * tpf * c..(t + 1) * tpf * c], &mut grad.stem)?;
        }
        Ok(grad)
    }
}

/// Pyramid of `[C, H_l, W_l]` maps for one `[1, H, W]` frame.
pub fn conv_stem<F: Scalar>(net: &Net<F>, frame: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
    net.stem.forward(frame)
}

pub fn encoder_forward<F: Scalar>(net: &Net<F>, pyramids: &MultiScaleFeatures<F>) -> Result<EncoderOutput<F>> {
    Ok(net.encode(&TokenFeatures::from_pyramids(pyramids))?.to_pyramids())
}

pub fn decoder_forward<F: Scalar>(net: &Net<F>, enc: &EncoderOutput<F>) -> Result<Detection<F>> {
    net.decode(&TokenFeatures::from_pyramids(enc))
}
