//! Independent reference implementations.
//!
//! Straight nested-loop transcriptions used by the `oracle` verification
//! suite and by tests. They share no code paths with the optimized
//! implementations they check: no gemm, no token layout, no shared
//! sampling helper.

#![allow(clippy::needless_range_loop)]

use crate::detection::CostMatrix;
use crate::numerics::Tensor;
use crate::stda::{MultiScaleFeatures, QueryBatch, StdaParams};
use crate::transformer::SelfAttention;

/// `y[r, o] = b[o] + sum_i w[o, i] x[r, i]` by plain loops.
pub fn linear(weight: &Tensor<f64>, bias: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    let (n_out, n_in) = (weight.dims()[0], weight.dims()[1]);
    let rows = x.len() / n_in;
    let mut y = vec![0.0; rows * n_out];
    for r in 0..rows {
        for o in 0..n_out {
            let mut s = bias.data()[o];
            for i in 0..n_in {
                s += weight.data()[o * n_in + i] * x[r * n_in + i];
            }
            y[r * n_out + o] = s;
        }
    }
    y
}

/// `exp(x_i) / sum_j exp(x_j)` without max subtraction.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let total: f64 = x.iter().map(|v| v.exp()).sum();
    x.iter().map(|v| v.exp() / total).collect()
}

/// Bilinear lookup of one channel, pixel centers at integer coordinates,
/// zero outside the grid.
pub fn bilinear(channel: &dyn Fn(i64, i64) -> Option<f64>, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (ax, ay) = (x - x0, y - y0);
    let (xi, yi) = (x0 as i64, y0 as i64);
    let mut s = 0.0;
    for (dy, wy) in [(0, 1.0 - ay), (1, ay)] {
        for (dx, wx) in [(0, 1.0 - ax), (1, ax)] {
            if let Some(v) = channel(yi + dy, xi + dx) {
                s += wy * wx * v;
            }
        }
    }
    s
}

/// Literal transcription of the STDA sum:
/// `out_q = sum_m W_m sum_t sum_l sum_k A_tlqk V_m(F_t^l)(phi_l(p_q) + dp_tlqk) + b`.
pub fn stda(params: &StdaParams<f64>, queries: &QueryBatch<f64>, feats: &MultiScaleFeatures<f64>) -> Tensor<f64> {
    let shape = params.shape();
    let (c, heads, frames, levels, points) = (shape.channels, shape.heads, shape.frames, shape.levels, shape.points);
    let d = c / heads;
    let n = queries.len();
    let zq = queries.features.data();
    let offsets = linear(&params.offset_net.weight, &params.offset_net.bias, zq);
    let logits = linear(&params.weight_net.weight, &params.weight_net.bias, zq);
    let per_head = frames * levels * points;

    // value projection of every pixel of every map, kept channel-major
    let projected: Vec<Vec<(usize, usize, Vec<f64>)>> = (0..frames)
        .map(|t| {
            (0..levels)
                .map(|l| {
                    let map = feats.map(t, l);
                    let (h, w) = (map.dims()[1], map.dims()[2]);
                    let mut out = vec![0.0; c * h * w];
                    for p in 0..h * w {
                        let pixel: Vec<f64> = (0..c).map(|ch| map.data()[ch * h * w + p]).collect();
                        let v = linear(&params.value_proj.weight, &params.value_proj.bias, &pixel);
                        for ch in 0..c {
                            out[ch * h * w + p] = v[ch];
                        }
                    }
                    (h, w, out)
                })
                .collect()
        })
        .collect();

    let w_out = params.output_proj.weight.data();
    let mut result = vec![0.0; n * c];
    for q in 0..n {
        let (px, py) = (queries.ref_points.data()[2 * q], queries.ref_points.data()[2 * q + 1]);
        for o in 0..c {
            result[q * c + o] = params.output_proj.bias.data()[o];
        }
        for m in 0..heads {
            let base = (q * heads + m) * per_head;
            let weights = softmax(&logits[base..base + per_head]);
            let mut head = vec![0.0; d];
            for t in 0..frames {
                for l in 0..levels {
                    let (h, w, ref map) = projected[t][l];
                    let x_l = px * w as f64 - 0.5;
                    let y_l = py * h as f64 - 0.5;
                    for k in 0..points {
                        let j = (t * levels + l) * points + k;
                        let a = weights[j];
                        let dx = offsets[2 * (base + j)];
                        let dy = offsets[2 * (base + j) + 1];
                        for (i, hv) in head.iter_mut().enumerate() {
                            let ch = m * d + i;
                            let lookup = |yy: i64, xx: i64| {
                                (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w)
                                    .then(|| map[ch * h * w + yy as usize * w + xx as usize])
                            };
                            *hv += a * bilinear(&lookup, x_l + dx, y_l + dy);
                        }
                    }
                }
            }
            // W_m is the block of output_proj columns belonging to head m
            for o in 0..c {
                for i in 0..d {
                    result[q * c + o] += w_out[o * c + m * d + i] * head[i];
                }
            }
        }
    }
    Tensor::new(vec![n, c], result).expect("oracle output shape")
}

/// Multi-head attention written out per head and per pair of rows.
pub fn self_attention(params: &SelfAttention<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let (n, c) = (x.dims()[0], x.dims()[1]);
    let heads = params.heads();
    let d = c / heads;
    let lin = |layer: &crate::numerics::LinearLayer<f64>| linear(&layer.weight, &layer.bias, x.data());
    let (q, k, v) = (lin(&params.query_proj), lin(&params.key_proj), lin(&params.value_proj));
    let mut concat = vec![0.0; n * c];
    for m in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    let mut s = 0.0;
                    for e in 0..d {
                        s += q[i * c + m * d + e] * k[j * c + m * d + e];
                    }
                    s / (d as f64).sqrt()
                })
                .collect();
            let a = softmax(&scores);
            for e in 0..d {
                concat[i * c + m * d + e] = (0..n).map(|j| a[j] * v[j * c + m * d + e]).sum();
            }
        }
    }
    let out = linear(&params.output_proj.weight, &params.output_proj.bias, &concat);
    Tensor::new(vec![n, c], out).expect("oracle output shape")
}

/// Minimum assignment cost by enumerating every injective map from the
/// smaller side into the larger one.
pub fn assignment_cost(cost: &CostMatrix) -> f64 {
    fn rec(cost: &CostMatrix, row: usize, used: &mut [bool], transposed: bool) -> f64 {
        let n = if transposed { cost.cols() } else { cost.rows() };
        if row == n {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                let c = if transposed { cost.at(j, row) } else { cost.at(row, j) };
                best = best.min(c + rec(cost, row + 1, used, transposed));
                used[j] = false;
            }
        }
        best
    }
    let transposed = cost.rows() > cost.cols();
    let m = cost.rows().max(cost.cols());
    rec(cost, 0, &mut vec![false; m], transposed)
}
