//! Standard multi-head scaled dot-product self-attention over object queries.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::numerics::ops::{softmax_backward_row, softmax_in_place};
use crate::numerics::{axpy, dot, LinearLayer, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention<F> {
    heads: usize,
    pub query_proj: LinearLayer<F>,
    pub key_proj: LinearLayer<F>,
    pub value_proj: LinearLayer<F>,
    pub output_proj: LinearLayer<F>,
}

crate::impl_params!(SelfAttention {
    query_proj,
    key_proj,
    value_proj,
    output_proj
});

#[derive(Debug, Clone)]
pub struct SelfAttentionCache<F> {
    n: usize,
    x: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    /// `[heads, n, n]` attention probabilities.
    attention: Vec<F>,
    mixed: Vec<F>,
}

impl<F: Scalar> SelfAttention<F> {
    fn check(channels: usize, heads: usize) -> Result<()> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(invalid!("{channels} channels do not split into {heads} heads"));
        }
        Ok(())
    }

    pub fn zeros(channels: usize, heads: usize) -> Result<Self> {
        Self::check(channels, heads)?;
        Ok(Self {
            heads,
            query_proj: LinearLayer::zeros(channels, channels),
            key_proj: LinearLayer::zeros(channels, channels),
            value_proj: LinearLayer::zeros(channels, channels),
            output_proj: LinearLayer::zeros(channels, channels),
        })
    }

    pub fn init(channels: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::check(channels, heads)?;
        Ok(Self {
            heads,
            query_proj: LinearLayer::xavier(channels, channels, rng),
            key_proj: LinearLayer::xavier(channels, channels, rng),
            value_proj: LinearLayer::xavier(channels, channels, rng),
            output_proj: LinearLayer::xavier(channels, channels, rng),
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn channels(&self) -> usize {
        self.query_proj.inputs()
    }

    /// Forward over `n` rows of `x` (`[n, C]`, row-major).
    pub fn forward_rows(&self, x: &[F], n: usize) -> Result<(Vec<F>, SelfAttentionCache<F>)> {
        let c = self.channels();
        if x.len() != n * c || n == 0 {
            return Err(invalid!("self-attention expects a non-empty [n, {c}] input"));
        }
        let d = c / self.heads;
        let scale = F::of(1.0 / (d as f64).sqrt());
        let q = self.query_proj.forward_rows(x, n);
        let k = self.key_proj.forward_rows(x, n);
        let v = self.value_proj.forward_rows(x, n);
        let mut attention = vec![F::zero(); self.heads * n * n];
        let mut mixed = vec![F::zero(); n * c];
        for m in 0..self.heads {
            let h = m * d..(m + 1) * d;
            for i in 0..n {
                let row = &mut attention[(m * n + i) * n..(m * n + i + 1) * n];
                let qi = &q[i * c..(i + 1) * c][h.clone()];
                for (j, r) in row.iter_mut().enumerate() {
                    *r = dot(qi, &k[j * c..(j + 1) * c][h.clone()]) * scale;
                }
                softmax_in_place(row);
                let out = &mut mixed[i * c + m * d..i * c + (m + 1) * d];
                for (j, &a) in row.iter().enumerate() {
                    axpy(a, &v[j * c + m * d..j * c + (m + 1) * d], out);
                }
            }
        }
        let y = self.output_proj.forward_rows(&mixed, n);
        Ok((
            y,
            SelfAttentionCache {
                n,
                x: x.to_vec(),
                q,
                k,
                v,
                attention,
                mixed,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward_rows(&self, cache: &SelfAttentionCache<F>, dy: &[F], grad: &mut SelfAttention<F>) -> Vec<F> {
        let (n, c) = (cache.n, self.channels());
        let d = c / self.heads;
        let scale = F::of(1.0 / (d as f64).sqrt());
        let d_mixed = self.output_proj.backward(&cache.mixed, dy, n, &mut grad.output_proj);
        let mut dq = vec![F::zero(); n * c];
        let mut dk = vec![F::zero(); n * c];
        let mut dv = vec![F::zero(); n * c];
        let mut da = vec![F::zero(); n];
        let mut ds = vec![F::zero(); n];
        for m in 0..self.heads {
            let h = m * d..(m + 1) * d;
            for i in 0..n {
                let a = &cache.attention[(m * n + i) * n..(m * n + i + 1) * n];
                let g = &d_mixed[i * c + m * d..i * c + (m + 1) * d];
                for j in 0..n {
                    da[j] = dot(g, &cache.v[j * c..(j + 1) * c][h.clone()]);
                    axpy(a[j], g, &mut dv[j * c + m * d..j * c + (m + 1) * d]);
                }
                softmax_backward_row(a, &da, &mut ds);
                for j in 0..n {
                    let s = ds[j] * scale;
                    axpy(
                        s,
                        &cache.k[j * c..(j + 1) * c][h.clone()],
                        &mut dq[i * c + m * d..i * c + (m + 1) * d],
                    );
                    axpy(
                        s,
                        &cache.q[i * c..(i + 1) * c][h.clone()],
                        &mut dk[j * c + m * d..j * c + (m + 1) * d],
                    );
                }
            }
        }
        let mut dx = self.query_proj.backward(&cache.x, &dq, n, &mut grad.query_proj);
        axpy(
            F::one(),
            &self.key_proj.backward(&cache.x, &dk, n, &mut grad.key_proj),
            &mut dx,
        );
        axpy(
            F::one(),
            &self.value_proj.backward(&cache.x, &dv, n, &mut grad.value_proj),
            &mut dx,
        );
        dx
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        if x.rank() != 2 || x.dims()[1] != self.channels() {
            return Err(invalid!(
                "self-attention expects [N, {}], got {:?}",
                self.channels(),
                x.dims()
            ));
        }
        let (y, _) = self.forward_rows(x.data(), x.dims()[0])?;
        Tensor::new(x.dims().to_vec(), y)
    }
}

/// `softmax(Q K^T / sqrt(d)) V` per head, concatenated and output-projected.
pub fn self_attention<F: Scalar>(x: &Tensor<F>, params: &SelfAttention<F>) -> Result<Tensor<F>> {
    params.forward(x)
}
