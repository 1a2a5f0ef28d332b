use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::ops::{layer_norm, relu_in_place};
use crate::numerics::{LayerNorm, Params, Tensor};
use crate::oracle;
use crate::stda::{MultiScaleFeatures, StdaParams, TokenFeatures};
use crate::verify::{gradient_suite, oracle_suite, tiny_net_config};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_frames(rng: &mut impl Rng, n: usize, h: usize, w: usize) -> Vec<Tensor<f64>> {
    (0..n)
        .map(|_| Tensor::from_fn(&[1, h, w], |_| rng.random_range(0.0..1.0)))
        .collect()
}

#[test]
fn stem_shapes() {
    let cfg = NetConfig::toy();
    let net = Net::<f32>::init(cfg, &mut rng(1)).unwrap();
    let frame = Tensor::full(&[1, 64, 64], 0.5f32);
    let maps = conv_stem(&net, &frame).unwrap();
    assert_eq!(maps.len(), 2);
    assert_eq!(maps[0].dims(), &[32, 16, 16]);
    assert_eq!(maps[1].dims(), &[32, 8, 8]);
    assert!(maps.iter().all(|m| m.is_finite()));
}

#[test]
fn stem_zero_frame_zero_bias() {
    let stem = ConvStem::<f64>::init(2, 4, 8, &mut rng(2));
    let maps = stem.forward(&Tensor::zeros(&[1, 32, 32])).unwrap();
    assert!(maps.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn stem_rejects_indivisible_frames() {
    let stem = ConvStem::<f64>::zeros(2, 4, 8);
    assert!(stem.forward(&Tensor::zeros(&[1, 36, 32])).is_err());
    assert!(stem.forward(&Tensor::zeros(&[2, 32, 32])).is_err());
}

fn random_pyramids(rng: &mut impl Rng, cfg: &NetConfig, h: usize, w: usize) -> MultiScaleFeatures<f64> {
    let frames = (0..cfg.frames)
        .map(|_| {
            (0..cfg.levels)
                .map(|l| {
                    Tensor::from_fn(&[cfg.channels, h >> (l + 2), w >> (l + 2)], |_| {
                        rng.random_range(-1.0..1.0)
                    })
                })
                .collect()
        })
        .collect();
    MultiScaleFeatures::new(frames).unwrap()
}

#[test]
fn empty_encoder_is_identity() {
    let cfg = NetConfig {
        enc_layers: 0,
        ..tiny_net_config()
    };
    let mut r = rng(3);
    let net = Net::<f64>::init(cfg, &mut r).unwrap();
    let input = random_pyramids(&mut r, &cfg, 16, 16);
    assert_eq!(encoder_forward(&net, &input).unwrap(), input);
}

#[test]
fn encoder_with_constant_attention_matches_composition() {
    let cfg = tiny_net_config();
    let mut r = rng(4);
    let mut net = Net::<f64>::init(cfg, &mut r).unwrap();
    let bias = Tensor::from_fn(&[cfg.channels], |_| r.random_range(-1.0..1.0));
    let layer = &mut net.encoder[0];
    layer.attention = StdaParams::zeros(cfg.stda_shape()).unwrap();
    layer.attention.output_proj.bias = bias.clone();
    layer.norm1.gain = Tensor::from_fn(&[cfg.channels], |_| r.random_range(0.5..1.5));
    layer.norm2.shift = Tensor::from_fn(&[cfg.channels], |_| r.random_range(-0.5..0.5));
    let input = random_pyramids(&mut r, &cfg, 16, 16);
    let got = TokenFeatures::from_pyramids(&encoder_forward(&net, &input).unwrap());

    let layer = &net.encoder[0];
    let x = TokenFeatures::from_pyramids(&input);
    let n = x.num_tokens();
    let c = cfg.channels;
    let mut sum = x.data().to_vec();
    for (i, v) in sum.iter_mut().enumerate() {
        *v += bias[i % c];
    }
    let ln = |t: &Tensor<f64>, p: &LayerNorm<f64>| layer_norm(t, &p.gain, &p.shift).unwrap();
    let x1 = ln(&Tensor::new(vec![n, c], sum).unwrap(), &layer.norm1);
    let mut h = oracle::linear(&layer.ffn.expand.weight, &layer.ffn.expand.bias, x1.data());
    relu_in_place(&mut h);
    let f = oracle::linear(&layer.ffn.contract.weight, &layer.ffn.contract.bias, &h);
    let z: Vec<f64> = x1.data().iter().zip(&f).map(|(a, b)| a + b).collect();
    let want = ln(&Tensor::new(vec![n, c], z).unwrap(), &layer.norm2);
    let err = got
        .data()
        .iter()
        .zip(want.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(err < 1e-12, "{err}");
}

#[test]
fn toy_encoder_preserves_shapes() {
    let cfg = NetConfig::toy();
    let mut r = rng(5);
    let net = Net::<f32>::init(cfg, &mut r).unwrap();
    let input = random_pyramids(&mut r, &cfg, 32, 32);
    let mut cast = Vec::new();
    for t in 0..cfg.frames {
        cast.push(input.frame(t).iter().map(|m| m.cast::<f32>()).collect());
    }
    let input = MultiScaleFeatures::new(cast).unwrap();
    let out = encoder_forward(&net, &input).unwrap();
    assert_eq!(out.level_shapes(), input.level_shapes());
    assert_eq!(out.num_frames(), cfg.frames);
    assert_eq!(out.channels(), cfg.channels);
    assert!(out.is_finite());
}

#[test]
fn encoder_rejects_wrong_frame_count() {
    let cfg = tiny_net_config();
    let mut r = rng(6);
    let net = Net::<f64>::init(cfg, &mut r).unwrap();
    let other = NetConfig { frames: 3, ..cfg };
    assert!(encoder_forward(&net, &random_pyramids(&mut r, &other, 16, 16)).is_err());
}

#[test]
fn empty_decoder_reads_raw_queries() {
    let cfg = NetConfig {
        dec_layers: 0,
        queries: 1,
        ..tiny_net_config()
    };
    let mut r = rng(7);
    let mut net = Net::<f64>::init(cfg, &mut r).unwrap();
    for layer in net.box_head.iter_mut() {
        layer.weight = Tensor::from_fn(layer.weight.dims(), |_| r.random_range(-3.0..3.0));
        layer.bias = Tensor::from_fn(layer.bias.dims(), |_| r.random_range(-3.0..3.0));
    }
    let enc = random_pyramids(&mut r, &cfg, 16, 16);
    let det = decoder_forward(&net, &enc).unwrap();
    assert_eq!(det.class_logits.dims(), &[1, 3]);
    assert_eq!(det.boxes.dims(), &[1, 4]);
    assert!(det.boxes.data().iter().all(|&b| b > 0.0 && b < 1.0));
    let want = oracle::linear(&net.class_head.weight, &net.class_head.bias, net.query_embed.data());
    for (a, b) in det.class_logits.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn boxes_stay_inside_unit_interval_for_extreme_weights() {
    let cfg = tiny_net_config();
    let mut r = rng(8);
    let mut net = Net::<f32>::init(cfg, &mut r).unwrap();
    net.box_head[2].bias = Tensor::from_fn(&[4], |i| if i % 2 == 0 { 1e4 } else { -1e4 });
    let frames: Vec<Tensor<f32>> = random_frames(&mut r, cfg.frames, 16, 16)
        .iter()
        .map(|f| f.cast())
        .collect();
    let det = net.forward(&frames.iter().collect::<Vec<_>>()).unwrap();
    assert!(det.boxes.data().iter().all(|&b| b > 0.0 && b < 1.0));
}

#[test]
fn forward_is_deterministic() {
    let cfg = tiny_net_config();
    let frames = random_frames(&mut rng(9), cfg.frames, 16, 16);
    let clip: Vec<&Tensor<f64>> = frames.iter().collect();
    let a = Net::<f64>::init(cfg, &mut rng(10)).unwrap().forward(&clip).unwrap();
    let b = Net::<f64>::init(cfg, &mut rng(10)).unwrap().forward(&clip).unwrap();
    assert_eq!(a, b);
}

#[test]
fn self_attention_single_row() {
    let sa = SelfAttention::<f64>::init(4, 2, &mut rng(11)).unwrap();
    let x = Tensor::new(vec![1, 4], vec![0.1, -0.4, 0.7, 0.2]).unwrap();
    let v = sa.value_proj.forward(&x).unwrap();
    let want = sa.output_proj.forward(&v).unwrap();
    assert!(self_attention(&x, &sa).unwrap().max_abs_diff(&want) < 1e-15);
}

#[test]
fn self_attention_identical_rows() {
    let sa = SelfAttention::<f64>::init(4, 2, &mut rng(12)).unwrap();
    let x = Tensor::from_fn(&[3, 4], |i| [0.3, -0.2, 0.5, 0.9][i % 4]);
    let y = self_attention(&x, &sa).unwrap();
    assert_eq!(y.row(0), y.row(1));
    assert_eq!(y.row(1), y.row(2));
}

#[test]
fn self_attention_matches_direct_formula() {
    let mut r = rng(13);
    let mut sa = SelfAttention::<f64>::init(8, 2, &mut r).unwrap();
    sa.visit_mut("", &mut |_, t| {
        for v in t.data_mut() {
            *v += r.random_range(-0.2..0.2);
        }
    });
    let x = Tensor::from_fn(&[5, 8], |_| r.random_range(-1.0..1.0));
    let err = self_attention(&x, &sa)
        .unwrap()
        .max_abs_diff(&oracle::self_attention(&sa, &x));
    assert!(err < 1e-10, "{err}");
}

#[test]
fn self_attention_rejects_uneven_heads() {
    assert!(SelfAttention::<f64>::zeros(6, 4).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let cfg = tiny_net_config();
    let net = Net::<f32>::init(cfg, &mut rng(14)).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&net, &mut buf).unwrap();
    assert_eq!(&buf[..4], b"STN1");
    let back: Net<f32> = read_checkpoint(cfg, &mut buf.as_slice(), "mem".as_ref()).unwrap();
    assert_eq!(back, net);
}

#[test]
fn checkpoint_rejects_damage() {
    let cfg = tiny_net_config();
    let net = Net::<f32>::init(cfg, &mut rng(15)).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&net, &mut buf).unwrap();
    let read = |b: &[u8], c: NetConfig| read_checkpoint::<f32>(c, &mut &b[..], "ck.stn1".as_ref());

    let err = read(&buf[..buf.len() - 3], cfg).unwrap_err().to_string();
    assert!(err.contains("ck.stn1") && err.contains("truncated"), "{err}");
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read(&bad, cfg).unwrap_err().to_string().contains("magic"));
    let mut long = buf.clone();
    long.push(0);
    assert!(read(&long, cfg).unwrap_err().to_string().contains("trailing"));
    let wider = NetConfig { channels: 12, ..cfg };
    assert!(read(&buf, wider).is_err());
}

#[test]
fn gradient_suite_passes() {
    for outcome in gradient_suite(1).unwrap() {
        assert!(outcome.passed, "{outcome:?}");
    }
}

#[test]
fn oracle_suite_passes() {
    for outcome in oracle_suite(1).unwrap() {
        assert!(outcome.passed, "{outcome:?}");
    }
}
