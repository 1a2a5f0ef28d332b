use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::gradcheck::{check_param_group, grad_check};
use crate::numerics::{Params, Tensor};
use crate::oracle;

fn toy_shape() -> StdaShape {
    StdaShape {
        channels: 4,
        heads: 2,
        frames: 2,
        levels: 2,
        points: 2,
    }
}

fn random_feats(rng: &mut impl Rng, shape: StdaShape, levels: &[(usize, usize)]) -> MultiScaleFeatures<f64> {
    let frames = (0..shape.frames)
        .map(|_| {
            levels
                .iter()
                .map(|&(h, w)| Tensor::from_fn(&[shape.channels, h, w], |_| rng.random_range(-1.0..1.0)))
                .collect()
        })
        .collect();
    MultiScaleFeatures::new(frames).unwrap()
}

fn random_queries(rng: &mut impl Rng, n: usize, c: usize) -> QueryBatch<f64> {
    QueryBatch::new(
        Tensor::from_fn(&[n, c], |_| rng.random_range(-1.0..1.0)),
        Tensor::from_fn(&[n, 2], |_| rng.random_range(0.0..1.0)),
    )
    .unwrap()
}

fn toy_instance(seed: u64) -> (StdaParams<f64>, QueryBatch<f64>, MultiScaleFeatures<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = toy_shape();
    let params = StdaParams::random(shape, 0.5, 3.0, &mut rng).unwrap();
    let feats = random_feats(&mut rng, shape, &[(5, 7), (3, 4)]);
    let queries = random_queries(&mut rng, 3, shape.channels);
    (params, queries, feats)
}

/// Scalar test loss `<out, probe>` so every output entry gets a distinct weight.
fn probe_loss(out: &Tensor<f64>) -> f64 {
    out.data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * (0.3 + 0.17 * i as f64).sin())
        .sum()
}

fn probe_grad(dims: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(dims, |i| (0.3 + 0.17 * i as f64).sin())
}

#[test]
fn zero_offset_net_gives_zero_offsets() {
    let (mut params, queries, _) = toy_instance(1);
    params.offset_net.weight.fill(0.0);
    params.offset_net.bias.fill(0.0);
    let off = params.predict_offsets(&queries).unwrap();
    assert_eq!(off.dims(), &[3, 2, 2, 2, 2, 2]);
    assert!(off.data().iter().all(|&v| v == 0.0));

    params.offset_net.bias = Tensor::from_fn(&[32], |i| i as f64 * 0.25);
    let off = params.predict_offsets(&queries).unwrap();
    for q in 0..3 {
        assert_eq!(off.row(0).len(), 2);
        let per_query = &off.data()[q * 32..(q + 1) * 32];
        assert_eq!(per_query, params.offset_net.bias.data());
    }
}

#[test]
fn offsets_match_linear_then_reshape() {
    let (params, queries, _) = toy_instance(2);
    let off = params.predict_offsets(&queries).unwrap();
    let expect = oracle::linear(
        &params.offset_net.weight,
        &params.offset_net.bias,
        queries.features.data(),
    );
    assert_eq!(off.data().len(), expect.len());
    for (a, b) in off.data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn constant_logits_give_uniform_weights() {
    let (mut params, queries, _) = toy_instance(3);
    params.weight_net.weight.fill(0.0);
    params.weight_net.bias.fill(0.7);
    let a = params.predict_attention_weights(&queries).unwrap();
    assert!(a.data().iter().all(|&w| (w - 1.0 / 8.0).abs() < 1e-15));
}

#[test]
fn attention_weights_match_flattened_softmax() {
    let (params, queries, _) = toy_instance(4);
    let a = params.predict_attention_weights(&queries).unwrap();
    assert_eq!(a.dims(), &[3, 2, 2, 2, 2]);
    let logits = oracle::linear(
        &params.weight_net.weight,
        &params.weight_net.bias,
        queries.features.data(),
    );
    for (got, chunk) in a.data().chunks(8).zip(logits.chunks(8)) {
        let want = oracle::softmax(chunk);
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
            assert!(*g > 0.0 && *g < 1.0);
        }
    }
}

#[test]
fn channel_mismatch_rejected() {
    let (params, _, feats) = toy_instance(5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let wrong = random_queries(&mut rng, 2, 6);
    assert!(params.predict_offsets(&wrong).is_err());
    assert!(params.predict_attention_weights(&wrong).is_err());
    assert!(params.forward(&wrong, &feats).is_err());
}

#[test]
fn frame_count_mismatch_rejected() {
    let (params, queries, _) = toy_instance(6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let shape = StdaShape {
        frames: 3,
        ..toy_shape()
    };
    let feats = random_feats(&mut rng, shape, &[(5, 7), (3, 4)]);
    assert!(params.forward(&queries, &feats).is_err());
}

#[test]
fn degenerate_single_sample_reads_bilinear() {
    let shape = StdaShape {
        channels: 1,
        heads: 1,
        frames: 1,
        levels: 1,
        points: 1,
    };
    let mut params = StdaParams::<f64>::zeros(shape).unwrap();
    params.value_proj.weight.fill(1.0);
    params.output_proj.weight.fill(1.0);
    let map = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let feats = MultiScaleFeatures::new(vec![vec![map.clone()]]).unwrap();
    for (px, py) in [(0.5, 0.5), (0.25, 0.25), (0.1, 0.9)] {
        let q = QueryBatch::new(
            Tensor::full(&[1, 1], 0.3),
            Tensor::new(vec![1, 2], vec![px, py]).unwrap(),
        )
        .unwrap();
        let (out, _) = params.forward(&q, &feats).unwrap();
        let p = normalize_to_level((px, py), LevelShape::new(2, 2));
        let expect = bilinear_sample(&map, p).unwrap();
        assert!((out[0] - expect[0]).abs() < 1e-15);
    }
}

#[test]
fn constant_maps_ignore_offsets() {
    let (params, queries, _) = toy_instance(7);
    let v = [0.4, -0.2, 0.9, 0.1];
    let frames = (0..2)
        .map(|_| {
            [(5, 7), (3, 4)]
                .iter()
                .map(|&(h, w)| Tensor::from_fn(&[4, h, w], |i| v[i / (h * w)]))
                .collect()
        })
        .collect();
    let feats = MultiScaleFeatures::new(frames).unwrap();
    // keep every sample strictly inside the grids so no zero padding leaks in
    let mut params = params;
    params.offset_net.weight.fill(0.0);
    params.offset_net.bias = Tensor::from_fn(&[32], |i| 0.3 * ((i as f64) * 1.7).sin());
    let queries = QueryBatch::new(queries.features, Tensor::full(&[3, 2], 0.5)).unwrap();
    let (out, cache) = params.forward(&queries, &feats).unwrap();
    let value = Tensor::new(vec![4], v.to_vec()).unwrap();
    let expect = params
        .output_proj
        .forward(&params.value_proj.forward(&value).unwrap())
        .unwrap();
    for q in 0..3 {
        for ch in 0..4 {
            assert!((out[q * 4 + ch] - expect[ch]).abs() < 1e-12);
        }
    }
    // flat field: moving a sample does not change what it reads
    let mut grad = StdaParams::zeros(params.shape()).unwrap();
    let g = params
        .backward_tokens(&cache, probe_grad(&[3, 4]).data(), &mut grad)
        .unwrap();
    assert!(grad.offset_net.weight.data().iter().all(|v| v.abs() < 1e-12));
    assert!(grad.offset_net.bias.data().iter().all(|v| v.abs() < 1e-12));
    assert!(g.ref_points.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn far_samples_return_output_bias() {
    let (mut params, queries, feats) = toy_instance(8);
    params.offset_net.weight.fill(0.0);
    params.offset_net.bias.fill(1e4);
    let (out, _) = params.forward(&queries, &feats).unwrap();
    for q in 0..3 {
        assert_eq!(out.row(q), params.output_proj.bias.data());
    }
}

#[test]
fn zero_output_gradient_gives_zero_gradients() {
    let (params, queries, feats) = toy_instance(9);
    let (_, cache) = params.forward(&queries, &feats).unwrap();
    let g = params.backward(cache, &Tensor::zeros(&[3, 4])).unwrap();
    assert_eq!(g.params.sq_norm(), 0.0);
    assert!(g.queries.data().iter().all(|&v| v == 0.0));
    assert!(g.ref_points.data().iter().all(|&v| v == 0.0));
    assert!(g
        .features
        .into_frames()
        .iter()
        .flatten()
        .all(|m| m.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn stale_cache_rejected() {
    let (params, queries, feats) = toy_instance(10);
    let (_, cache) = params.forward(&queries, &feats).unwrap();
    let mut changed = params.clone();
    changed.value_proj.weight[0] += 1.0;
    assert!(changed.backward(cache.clone(), &Tensor::zeros(&[3, 4])).is_err());
    assert!(params.backward(cache, &Tensor::zeros(&[2, 4])).is_err());
}

#[test]
fn matches_nested_loop_oracle() {
    for seed in 0..10 {
        let (params, queries, feats) = toy_instance(100 + seed);
        let (out, _) = params.forward(&queries, &feats).unwrap();
        let expect = oracle::stda(&params, &queries, &feats);
        let err = out.max_abs_diff(&expect);
        assert!(err < 1e-10, "seed {seed}: {err}");
    }
}

#[test]
fn frame_permutation_equivariance() {
    let (params, queries, feats) = toy_instance(11);
    let (out, _) = params.forward(&queries, &feats).unwrap();
    // swap frames and the matching t-slices of the offset and weight predictors
    let mut swapped = params.clone();
    let s = params.shape();
    let c = s.channels;
    for m in 0..s.heads {
        for l in 0..s.levels {
            for k in 0..s.points {
                for (t_new, t_old) in [(0, 1), (1, 0)] {
                    let wi_new = s.weight_index(0, m, t_new, l, k);
                    let wi_old = s.weight_index(0, m, t_old, l, k);
                    swapped.weight_net.bias[wi_new] = params.weight_net.bias[wi_old];
                    for i in 0..c {
                        swapped.weight_net.weight[wi_new * c + i] = params.weight_net.weight[wi_old * c + i];
                    }
                    for xy in 0..2 {
                        let (a, b) = (2 * wi_new + xy, 2 * wi_old + xy);
                        swapped.offset_net.bias[a] = params.offset_net.bias[b];
                        for i in 0..c {
                            swapped.offset_net.weight[a * c + i] = params.offset_net.weight[b * c + i];
                        }
                    }
                }
            }
        }
    }
    let frames = feats.into_frames();
    let flipped = MultiScaleFeatures::new(vec![frames[1].clone(), frames[0].clone()]).unwrap();
    let (out2, _) = swapped.forward(&queries, &flipped).unwrap();
    assert!(out.max_abs_diff(&out2) < 1e-12);
}

#[test]
fn backward_passes_gradcheck() {
    let (params, queries, feats) = toy_instance(12);
    let (out, cache) = params.forward(&queries, &feats).unwrap();
    let g = params.backward(cache, &probe_grad(out.dims())).unwrap();

    for group in ["value_proj", "offset_net", "weight_net", "output_proj"] {
        let r = check_param_group(&params, &g.params, group, 64, 1e-6, |p| {
            Ok(probe_loss(&p.forward(&queries, &feats)?.0))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{group}: {r:?}");
    }

    let r = grad_check(
        |t| {
            let q = QueryBatch::new(t.clone(), queries.ref_points.clone())?;
            Ok(probe_loss(&params.forward(&q, &feats)?.0))
        },
        &queries.features,
        &g.queries,
        1e-6,
        None,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "queries: {r:?}");

    let r = grad_check(
        |t| {
            let q = QueryBatch::new(queries.features.clone(), t.clone())?;
            Ok(probe_loss(&params.forward(&q, &feats)?.0))
        },
        &queries.ref_points,
        &g.ref_points,
        1e-7,
        None,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "reference points: {r:?}");

    for t in 0..2 {
        for l in 0..2 {
            let r = grad_check(
                |m| {
                    let mut frames = feats.clone().into_frames();
                    frames[t][l] = m.clone();
                    let f = MultiScaleFeatures::new(frames)?;
                    Ok(probe_loss(&params.forward(&queries, &f)?.0))
                },
                feats.map(t, l),
                g.features.map(t, l),
                1e-6,
                None,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "features t={t} l={l}: {r:?}");
        }
    }
}

#[test]
fn init_is_uniform_ring() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shape = StdaShape {
        channels: 8,
        heads: 2,
        frames: 3,
        levels: 2,
        points: 2,
    };
    let params = StdaParams::<f64>::init(shape, &mut rng).unwrap();
    let queries = random_queries(&mut rng, 4, 8);
    let a = params.predict_attention_weights(&queries).unwrap();
    assert!(a.data().iter().all(|&w| (w - 1.0 / 12.0).abs() < 1e-15));
    let off = params.predict_offsets(&queries).unwrap();
    for pair in off.data().chunks(2) {
        assert!(((pair[0] * pair[0] + pair[1] * pair[1]).sqrt() - 1.0).abs() < 1e-12);
    }
}
