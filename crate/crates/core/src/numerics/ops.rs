use crate::error::{invalid, Result};

use super::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Softmax over the trailing axis.
pub fn softmax<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let mut y = x.clone();
    let n = x.last_dim();
    for row in y.data_mut().chunks_mut(n) {
        softmax_in_place(row);
    }
    y
}

/// Max-subtracted softmax of one row, in place.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = total.recip();
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Vector-Jacobian product of softmax for one row: `y * (dy - <y, dy>)`.
pub fn softmax_backward_row<F: Scalar>(y: &[F], dy: &[F], dx: &mut [F]) {
    let inner = super::dot(y, dy);
    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(dy) {
        *d = yi * (gi - inner);
    }
}

pub fn softmax_backward<F: Scalar>(y: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let n = y.last_dim();
    let mut dx = Tensor::zeros(y.dims());
    for ((yr, gr), dr) in y
        .data()
        .chunks(n)
        .zip(dy.data().chunks(n))
        .zip(dx.data_mut().chunks_mut(n))
    {
        softmax_backward_row(yr, gr, dr);
    }
    dx
}

#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        (F::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Sigmoid kept strictly inside (0, 1) even where it saturates in floating point.
#[inline]
pub fn bounded_sigmoid<F: Scalar>(x: F) -> F {
    let eps = F::epsilon();
    sigmoid(x).max(eps).min(F::one() - eps)
}

/// Inverse sigmoid with the argument clamped away from 0 and 1.
#[inline]
pub fn logit<F: Scalar>(p: F) -> F {
    let eps = F::of(1e-5);
    let p = p.max(eps).min(F::one() - eps);
    (p / (F::one() - p)).ln()
}

pub fn relu_in_place<F: Scalar>(x: &mut [F]) {
    for v in x.iter_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward_in_place<F: Scalar>(activated: &[F], grad: &mut [F]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= F::zero() {
            *g = F::zero();
        }
    }
}

/// Per-position normalization over the channel axis with a learned affine.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<F> {
    pub gain: Tensor<F>,
    pub shift: Tensor<F>,
}

crate::impl_params!(LayerNorm { gain, shift });

#[derive(Clone, Debug)]
pub struct LayerNormCache<F> {
    normalized: Vec<F>,
    inv_std: Vec<F>,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gain: Tensor::full(&[channels], F::one()),
            shift: Tensor::zeros(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.gain.len()
    }

    pub fn forward_rows(&self, x: &[F]) -> (Vec<F>, LayerNormCache<F>) {
        let c = self.channels();
        let rows = x.len() / c;
        let eps = F::of(LAYER_NORM_EPS);
        let inv_c = F::of(1.0 / c as f64);
        let mut normalized = vec![F::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut y = vec![F::zero(); x.len()];
        for r in 0..rows {
            let xr = &x[r * c..(r + 1) * c];
            let mean = xr.iter().copied().sum::<F>() * inv_c;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_c;
            let s = (var + eps).sqrt().recip();
            inv_std.push(s);
            for i in 0..c {
                let h = (xr[i] - mean) * s;
                normalized[r * c + i] = h;
                y[r * c + i] = h * self.gain[i] + self.shift[i];
            }
        }
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward_rows(&self, cache: &LayerNormCache<F>, dy: &[F], grad: &mut LayerNorm<F>) -> Vec<F> {
        let c = self.channels();
        let rows = dy.len() / c;
        let inv_c = F::of(1.0 / c as f64);
        let mut dx = vec![F::zero(); dy.len()];
        let mut dh = vec![F::zero(); c];
        for r in 0..rows {
            let h = &cache.normalized[r * c..(r + 1) * c];
            let g = &dy[r * c..(r + 1) * c];
            let mut mean_dh = F::zero();
            let mut mean_dh_h = F::zero();
            for i in 0..c {
                grad.gain[i] += g[i] * h[i];
                grad.shift[i] += g[i];
                dh[i] = g[i] * self.gain[i];
                mean_dh += dh[i];
                mean_dh_h += dh[i] * h[i];
            }
            mean_dh *= inv_c;
            mean_dh_h *= inv_c;
            let s = cache.inv_std[r];
            for i in 0..c {
                dx[r * c + i] = s * (dh[i] - mean_dh - h[i] * mean_dh_h);
            }
        }
        dx
    }
}

/// Layer normalization of `x[..., c]` with explicit gain and shift.
pub fn layer_norm<F: Scalar>(x: &Tensor<F>, gain: &Tensor<F>, shift: &Tensor<F>) -> Result<Tensor<F>> {
    let c = x.last_dim();
    if gain.dims() != [c] || shift.dims() != [c] {
        return Err(invalid!(
            "layer norm over {c} channels got gain {:?} and shift {:?}",
            gain.dims(),
            shift.dims()
        ));
    }
    let norm = LayerNorm {
        gain: gain.clone(),
        shift: shift.clone(),
    };
    Tensor::new(x.dims().to_vec(), norm.forward_rows(x.data()).0)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn softmax_uniform_and_stable() {
        let y = softmax(&Tensor::<f64>::zeros(&[3]));
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax(&Tensor::<f64>::new(vec![2], vec![1000.0, 0.0]).unwrap());
        assert!((y[0] - 1.0).abs() < 1e-12);
        assert!(y[1].abs() < 1e-12);
        assert!(y.is_finite());
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Tensor::<f64>::from_fn(&[7], |_| rng.random_range(-3.0..3.0));
        let total: f64 = x.data().iter().map(|v| v.exp()).sum();
        let y = softmax(&x);
        for (yi, xi) in y.data().iter().zip(x.data()) {
            assert!((yi - xi.exp() / total).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let one = Tensor::<f64>::full(&[4], 1.0);
        let zero = Tensor::<f64>::zeros(&[4]);
        let y = layer_norm(&Tensor::full(&[2, 4], 3.5), &one, &zero).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));

        let y = layer_norm(
            &Tensor::<f64>::new(vec![2], vec![1.0, -1.0]).unwrap(),
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
        )
        .unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y[0] - expect).abs() < 1e-12 && (y[1] + expect).abs() < 1e-12);

        let y = layer_norm(
            &Tensor::<f64>::new(vec![1], vec![0.3]).unwrap(),
            &Tensor::zeros(&[1]),
            &Tensor::full(&[1], 5.0),
        )
        .unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn layer_norm_rejects_bad_affine() {
        let x = Tensor::<f32>::zeros(&[2, 3]);
        assert!(layer_norm(&x, &Tensor::zeros(&[2]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn sigmoid_stays_open() {
        assert!(bounded_sigmoid(100.0f32) < 1.0);
        assert!(bounded_sigmoid(-100.0f32) > 0.0);
        assert!((logit(sigmoid(0.3f64)) - 0.3).abs() < 1e-12);
    }
}
