//! Verification suites: finite-difference checks of every hand-written
//! backward pass and equivalence checks against the brute-force oracles.
//! Both run in 64-bit precision on small shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{giou, hungarian_match, set_loss, CostMatrix, Detection, GroundTruth, LossWeights};
use crate::error::Result;
use crate::numerics::gradcheck::{check_param_group, grad_check, worst, DEFAULT_STEP};
use crate::numerics::ops::softmax_in_place;
use crate::numerics::{GradCheckReport, LayerNorm, LinearLayer, Params, Scalar, Tensor};
use crate::oracle;
use crate::stda::{bilinear_sample, bilinear_sample_backward, MultiScaleFeatures, QueryBatch, StdaParams, StdaShape};
use crate::transformer::{ConvStem, Net, NetConfig, SelfAttention};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Result of one named check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    /// Largest observed error (relative for gradient checks, absolute otherwise).
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckOutcome {
    pub fn new(name: impl Into<String>, error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            error,
            tolerance,
            passed: error.is_finite() && error < tolerance,
        }
    }

    fn from_report(name: impl Into<String>, r: GradCheckReport) -> Self {
        Self::new(name, r.max_rel_error, GRADIENT_TOLERANCE)
    }
}

/// Per-entry weights of the probe loss `sum_i w_i y_i`.
pub fn probe_weights(len: usize) -> Vec<f64> {
    (0..len).map(|i| (0.3 + 0.17 * i as f64).sin()).collect()
}

fn probe_loss(y: &[f64]) -> f64 {
    y.iter().zip(probe_weights(y.len())).map(|(a, b)| a * b).sum()
}

fn uniform(rng: &mut impl Rng, dims: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.random_range(-scale..scale))
}

fn perturb<P: Params<f64>>(p: &mut P, rng: &mut impl Rng, scale: f64) {
    p.visit_mut("", &mut |_, t| {
        for v in t.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    });
}

/// STDA layer shape of the toy instances.
pub fn stda_toy_shape() -> StdaShape {
    StdaShape {
        channels: 4,
        heads: 2,
        frames: 2,
        levels: 2,
        points: 2,
    }
}

/// Random STDA layer, three queries and two frames of 5x7 and 3x4 maps.
pub fn stda_toy_instance<F: Scalar>(seed: u64) -> (StdaParams<F>, QueryBatch<F>, MultiScaleFeatures<F>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = stda_toy_shape();
    let params = StdaParams::random(shape, 0.5, 3.0, &mut rng).expect("valid toy shape");
    let frames = (0..shape.frames)
        .map(|_| {
            [(5, 7), (3, 4)]
                .iter()
                .map(|&(h, w)| Tensor::from_fn(&[shape.channels, h, w], |_| F::of(rng.random_range(-1.0..1.0))))
                .collect()
        })
        .collect();
    let feats = MultiScaleFeatures::new(frames).expect("consistent pyramids");
    let queries = QueryBatch::new(
        Tensor::from_fn(&[3, shape.channels], |_| F::of(rng.random_range(-1.0..1.0))),
        Tensor::from_fn(&[3, 2], |_| F::of(rng.random_range(0.0..1.0))),
    )
    .expect("valid queries");
    (params, queries, feats)
}

/// Smallest network exercising every component: two frames of 16x16.
pub fn tiny_net_config() -> NetConfig {
    NetConfig {
        frames: 2,
        levels: 2,
        channels: 8,
        heads: 2,
        points: 2,
        enc_layers: 1,
        dec_layers: 1,
        queries: 4,
        ffn_hidden: 8,
        num_classes: 2,
        stem_channels: 4,
    }
}

/// Attention weights sum to one per (query, head) for `trials` random layers
/// of random shape, evaluated in 32-bit precision.
pub fn attention_normalization(seed: u64, trials: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut err = 0.0f64;
    for _ in 0..trials {
        let heads = rng.random_range(1..=4);
        let shape = StdaShape {
            channels: heads * rng.random_range(1..=4),
            heads,
            frames: rng.random_range(1..=6),
            levels: rng.random_range(1..=4),
            points: rng.random_range(1..=4),
        };
        let params = StdaParams::<f32>::random(shape, 1.0, 1.0, &mut rng)?;
        let n = rng.random_range(1..=8);
        let queries = QueryBatch::new(
            Tensor::from_fn(&[n, shape.channels], |_| rng.random_range(-2.0..2.0)),
            Tensor::from_fn(&[n, 2], |_| rng.random_range(0.0..1.0)),
        )?;
        let a = params.predict_attention_weights(&queries)?;
        for group in a.data().chunks(shape.samples_per_head()) {
            if group.iter().any(|&v| !(v > 0.0 && v < 1.0)) && group.len() > 1 {
                return Ok(CheckOutcome::new("attention_normalization", f64::INFINITY, 1e-6));
            }
            let s: f64 = group.iter().map(|&v| v as f64).sum();
            err = err.max((s - 1.0).abs());
        }
    }
    Ok(CheckOutcome::new("attention_normalization", err, 1e-6))
}

/// STDA forward against the nested-loop transcription on `trials` toy instances.
pub fn stda_oracle(seed: u64, trials: usize) -> Result<CheckOutcome> {
    let mut err = 0.0f64;
    for i in 0..trials {
        let (params, queries, feats) = stda_toy_instance::<f64>(seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        let (out, _) = params.forward(&queries, &feats)?;
        err = err.max(out.max_abs_diff(&oracle::stda(&params, &queries, &feats)));
    }
    Ok(CheckOutcome::new("stda_vs_nested_loops", err, 1e-10))
}

/// Hungarian assignment cost against exhaustive enumeration, sizes up to 6x6.
pub fn hungarian_oracle(seed: u64, trials: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut err = 0.0f64;
    for _ in 0..trials {
        let (r, c) = (rng.random_range(0..=6), rng.random_range(0..=6));
        let data = (0..r * c).map(|_| rng.random_range(-5.0..5.0)).collect();
        let cost = CostMatrix::new(r, c, data)?;
        let m = hungarian_match(&cost);
        let mut used_q = vec![false; r];
        let mut used_g = vec![false; c];
        for &(q, g) in &m.pairs {
            if std::mem::replace(&mut used_q[q], true) || std::mem::replace(&mut used_g[g], true) {
                return Ok(CheckOutcome::new("hungarian_vs_enumeration", f64::INFINITY, 1e-9));
            }
        }
        if m.pairs.len() != r.min(c) {
            return Ok(CheckOutcome::new("hungarian_vs_enumeration", f64::INFINITY, 1e-9));
        }
        err = err.max((m.total_cost - oracle::assignment_cost(&cost)).abs());
    }
    Ok(CheckOutcome::new("hungarian_vs_enumeration", err, 1e-9))
}

/// Every brute-force equivalence check.
pub fn oracle_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let (mut err64, mut err32) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let (i, o) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let rows = rng.random_range(1..=16);
        let layer = LinearLayer::new(uniform(&mut rng, &[o, i], 1.0), uniform(&mut rng, &[o], 1.0))?;
        let x = uniform(&mut rng, &[rows, i], 1.0);
        let want = oracle::linear(&layer.weight, &layer.bias, x.data());
        let got = layer.forward(&x)?;
        for (a, b) in got.data().iter().zip(&want) {
            err64 = err64.max((a - b).abs());
        }
        let mut layer32 = LinearLayer::<f32>::zeros(i, o);
        layer32.copy_from(&layer)?;
        let got32 = layer32.forward(&x.cast())?;
        for (a, b) in got32.data().iter().zip(&want) {
            err32 = err32.max((*a as f64 - b).abs());
        }
    }
    out.push(CheckOutcome::new("linear_vs_loops_f64", err64, 1e-12));
    out.push(CheckOutcome::new("linear_vs_loops_f32", err32, 1e-5));

    let mut err = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=12);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut y = x.clone();
        softmax_in_place(&mut y);
        for (a, b) in y.iter().zip(oracle::softmax(&x)) {
            err = err.max((a - b).abs());
        }
    }
    out.push(CheckOutcome::new("softmax_vs_direct", err, 1e-12));

    out.push(attention_normalization(seed, 1000)?);
    out.push(stda_oracle(seed, 100)?);

    let mut err = 0.0f64;
    for _ in 0..50 {
        let heads = rng.random_range(1..=3);
        let c = heads * rng.random_range(1..=4);
        let n = rng.random_range(1..=7);
        let mut sa = SelfAttention::<f64>::init(c, heads, &mut rng)?;
        perturb(&mut sa, &mut rng, 0.3);
        let x = uniform(&mut rng, &[n, c], 1.0);
        err = err.max(sa.forward(&x)?.max_abs_diff(&oracle::self_attention(&sa, &x)));
    }
    out.push(CheckOutcome::new("self_attention_vs_direct", err, 1e-10));

    out.push(hungarian_oracle(seed, 1000)?);
    Ok(out)
}

fn check_linear(rng: &mut ChaCha8Rng) -> Result<Vec<CheckOutcome>> {
    let mut layer = LinearLayer::<f64>::xavier(5, 3, rng);
    perturb(&mut layer, rng, 0.3);
    let x = uniform(rng, &[4, 5], 1.0);
    let dy = probe_weights(12);
    let mut grad = layer.zeros_like();
    let dx = layer.backward(x.data(), &dy, 4, &mut grad);
    let params = check_param_group(&layer, &grad, "", 100, DEFAULT_STEP, |p| {
        Ok(probe_loss(&p.forward_rows(x.data(), 4)))
    })?;
    let input = grad_check(
        |t| Ok(probe_loss(&layer.forward_rows(t.data(), 4))),
        &x,
        &Tensor::new(vec![4, 5], dx)?,
        DEFAULT_STEP,
        None,
    )?;
    Ok(vec![
        CheckOutcome::from_report("linear/params", params),
        CheckOutcome::from_report("linear/input", input),
    ])
}

fn check_layer_norm(rng: &mut ChaCha8Rng) -> Result<Vec<CheckOutcome>> {
    let mut ln = LayerNorm::<f64>::new(6);
    perturb(&mut ln, rng, 0.5);
    let x = uniform(rng, &[3, 6], 2.0);
    let (_, cache) = ln.forward_rows(x.data());
    let mut grad = ln.zeros_like();
    let dx = ln.backward_rows(&cache, &probe_weights(18), &mut grad);
    let params = check_param_group(&ln, &grad, "", 100, DEFAULT_STEP, |p| {
        Ok(probe_loss(&p.forward_rows(x.data()).0))
    })?;
    let input = grad_check(
        |t| Ok(probe_loss(&ln.forward_rows(t.data()).0)),
        &x,
        &Tensor::new(vec![3, 6], dx)?,
        DEFAULT_STEP,
        None,
    )?;
    Ok(vec![
        CheckOutcome::from_report("layer_norm/params", params),
        CheckOutcome::from_report("layer_norm/input", input),
    ])
}

fn check_bilinear(rng: &mut ChaCha8Rng) -> Result<Vec<CheckOutcome>> {
    let map = uniform(rng, &[3, 4, 5], 1.0);
    let mut map_report = Vec::new();
    let mut point_report = Vec::new();
    for _ in 0..8 {
        let p = (rng.random_range(-0.9..4.9), rng.random_range(-0.9..3.9));
        let d_out = Tensor::new(vec![3], probe_weights(3))?;
        let (d_map, (gx, gy)) = bilinear_sample_backward(&map, p, &d_out)?;
        map_report.push(grad_check(
            |m| Ok(probe_loss(bilinear_sample(m, p)?.data())),
            &map,
            &d_map,
            DEFAULT_STEP,
            None,
        )?);
        let theta = Tensor::new(vec![2], vec![p.0, p.1])?;
        point_report.push(grad_check(
            |t| Ok(probe_loss(bilinear_sample(&map, (t[0], t[1]))?.data())),
            &theta,
            &Tensor::new(vec![2], vec![gx, gy])?,
            DEFAULT_STEP,
            None,
        )?);
    }
    Ok(vec![
        CheckOutcome::from_report("bilinear/map", worst(map_report).expect("non-empty")),
        CheckOutcome::from_report("bilinear/point", worst(point_report).expect("non-empty")),
    ])
}

fn check_stda(seed: u64) -> Result<Vec<CheckOutcome>> {
    let (params, queries, feats) = stda_toy_instance::<f64>(seed);
    let (out, cache) = params.forward(&queries, &feats)?;
    let d_out = Tensor::new(out.dims().to_vec(), probe_weights(out.len()))?;
    let g = params.backward(cache, &d_out)?;
    let mut res = Vec::new();
    for group in ["value_proj", "offset_net", "weight_net", "output_proj"] {
        let r = check_param_group(&params, &g.params, group, 12, DEFAULT_STEP, |p| {
            Ok(probe_loss(p.forward(&queries, &feats)?.0.data()))
        })?;
        res.push(CheckOutcome::from_report(format!("stda/{group}"), r));
    }
    let q = grad_check(
        |t| {
            let qb = QueryBatch::new(t.clone(), queries.ref_points.clone())?;
            Ok(probe_loss(params.forward(&qb, &feats)?.0.data()))
        },
        &queries.features,
        &g.queries,
        DEFAULT_STEP,
        None,
    )?;
    res.push(CheckOutcome::from_report("stda/queries", q));
    let r = grad_check(
        |t| {
            let qb = QueryBatch::new(queries.features.clone(), t.clone())?;
            Ok(probe_loss(params.forward(&qb, &feats)?.0.data()))
        },
        &queries.ref_points,
        &g.ref_points,
        DEFAULT_STEP,
        None,
    )?;
    res.push(CheckOutcome::from_report("stda/ref_points", r));
    let mut reports = Vec::new();
    for (t, frame) in feats.clone().into_frames().into_iter().enumerate() {
        for (l, map) in frame.into_iter().enumerate() {
            let r = grad_check(
                |m| {
                    let mut frames = feats.clone().into_frames();
                    frames[t][l] = m.clone();
                    Ok(probe_loss(
                        params.forward(&queries, &MultiScaleFeatures::new(frames)?)?.0.data(),
                    ))
                },
                &map,
                g.features.map(t, l),
                DEFAULT_STEP,
                None,
            )?;
            reports.push(r);
        }
    }
    res.push(CheckOutcome::from_report(
        "stda/features",
        worst(reports).expect("non-empty"),
    ));
    Ok(res)
}

fn check_self_attention(rng: &mut ChaCha8Rng) -> Result<Vec<CheckOutcome>> {
    let mut sa = SelfAttention::<f64>::init(6, 2, rng)?;
    perturb(&mut sa, rng, 0.3);
    let x = uniform(rng, &[5, 6], 1.0);
    let (_, cache) = sa.forward_rows(x.data(), 5)?;
    let mut grad = sa.zeros_like();
    let dx = sa.backward_rows(&cache, &probe_weights(30), &mut grad);
    let params = check_param_group(&sa, &grad, "", 100, DEFAULT_STEP, |p| {
        Ok(probe_loss(&p.forward_rows(x.data(), 5)?.0))
    })?;
    let input = grad_check(
        |t| Ok(probe_loss(&sa.forward_rows(t.data(), 5)?.0)),
        &x,
        &Tensor::new(vec![5, 6], dx)?,
        DEFAULT_STEP,
        None,
    )?;
    Ok(vec![
        CheckOutcome::from_report("self_attention/params", params),
        CheckOutcome::from_report("self_attention/input", input),
    ])
}

fn check_stem(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let mut stem = ConvStem::<f64>::init(2, 3, 4, rng);
    perturb(&mut stem, rng, 0.1);
    let frame = Tensor::from_fn(&[1, 16, 8], |_| rng.random_range(0.0..1.0));
    let (tokens, _, cache) = stem.forward_tokens(&frame)?;
    let mut grad = stem.zeros_like();
    stem.backward_tokens(&cache, &probe_weights(tokens.len()), &mut grad)?;
    let r = check_param_group(&stem, &grad, "", 16, DEFAULT_STEP, |p| {
        Ok(probe_loss(&p.forward_tokens(&frame)?.0))
    })?;
    Ok(CheckOutcome::from_report("stem/params", r))
}

fn random_detection(rng: &mut ChaCha8Rng, n: usize) -> Detection<f64> {
    Detection {
        class_logits: uniform(rng, &[n, 3], 2.0),
        boxes: Tensor::from_fn(&[n, 4], |i| {
            if i % 4 < 2 {
                rng.random_range(0.2..0.8)
            } else {
                rng.random_range(0.05..0.4)
            }
        }),
    }
}

fn two_lesions() -> GroundTruth {
    GroundTruth::new(vec![[0.3, 0.4, 0.2, 0.3], [0.7, 0.6, 0.25, 0.2]], vec![0, 1]).expect("valid boxes")
}

fn check_loss(rng: &mut ChaCha8Rng) -> Result<Vec<CheckOutcome>> {
    let pred = random_detection(rng, 5);
    let gt = two_lesions();
    let w = LossWeights::default();
    let loss = set_loss(&pred, &gt, &w)?;
    let logits = grad_check(
        |t| {
            let p = Detection {
                class_logits: t.clone(),
                boxes: pred.boxes.clone(),
            };
            Ok(set_loss(&p, &gt, &w)?.total)
        },
        &pred.class_logits,
        &loss.grad.class_logits,
        DEFAULT_STEP,
        None,
    )?;
    let boxes = grad_check(
        |t| {
            let p = Detection {
                class_logits: pred.class_logits.clone(),
                boxes: t.clone(),
            };
            Ok(set_loss(&p, &gt, &w)?.total)
        },
        &pred.boxes,
        &loss.grad.boxes,
        DEFAULT_STEP,
        None,
    )?;
    // giou is exercised through the box term above; check its value contract too
    let g = giou(&[0.2, 0.2, 0.2, 0.2], &[0.8, 0.8, 0.2, 0.2])?;
    Ok(vec![
        CheckOutcome::from_report("set_loss/logits", logits),
        CheckOutcome::from_report("set_loss/boxes", boxes),
        CheckOutcome::new("giou/disjoint_value", (g + 0.875).abs(), 1e-12),
    ])
}

/// End-to-end check of the set loss through heads, decoder, encoder and stem.
fn check_network(rng: &mut ChaCha8Rng) -> Result<Vec<CheckOutcome>> {
    let cfg = tiny_net_config();
    let mut net = Net::<f64>::init(cfg, rng)?;
    perturb(&mut net, rng, 0.1);
    let frames: Vec<Tensor<f64>> = (0..cfg.frames)
        .map(|_| Tensor::from_fn(&[1, 16, 16], |_| rng.random_range(0.0..1.0)))
        .collect();
    let clip: Vec<&Tensor<f64>> = frames.iter().collect();
    let gt = two_lesions();
    let w = LossWeights::default();
    let (det, cache) = net.forward_train(&clip)?;
    let loss = set_loss(&det, &gt, &w)?;
    let grad = net.backward(&cache, &loss.grad)?;
    let mut out = Vec::new();
    for group in [
        "stem",
        "level_embed",
        "encoder",
        "query_embed",
        "reference",
        "decoder",
        "class_head",
        "box_head",
    ] {
        let r = check_param_group(&net, &grad, group, 3, DEFAULT_STEP, |p| {
            Ok(set_loss(&p.forward(&clip)?, &gt, &w)?.total)
        })?;
        out.push(CheckOutcome::from_report(format!("network/{group}"), r));
    }
    Ok(out)
}

/// Finite-difference checks of every differentiable operation.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    out.extend(check_linear(&mut rng)?);
    out.extend(check_layer_norm(&mut rng)?);
    out.extend(check_bilinear(&mut rng)?);
    out.extend(check_stda(seed)?);
    out.extend(check_self_attention(&mut rng)?);
    out.push(check_stem(&mut rng)?);
    out.extend(check_loss(&mut rng)?);
    out.extend(check_network(&mut rng)?);
    Ok(out)
}
