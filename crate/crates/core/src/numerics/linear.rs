use rand::Rng;

use crate::error::{invalid, Result};

use super::{Scalar, Tensor};

/// Affine map `y = x W^T + b` over the trailing axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer<F> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

crate::impl_params!(LinearLayer { weight, bias });

impl<F: Scalar> LinearLayer<F> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn new(weight: Tensor<F>, bias: Tensor<F>) -> Result<Self> {
        if weight.rank() != 2 || bias.rank() != 1 || bias.dims()[0] != weight.dims()[0] {
            return Err(invalid!(
                "linear layer weight {:?} and bias {:?} disagree",
                weight.dims(),
                bias.dims()
            ));
        }
        Ok(Self { weight, bias })
    }

    /// Fan-based uniform init `U(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn xavier(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            weight: Tensor::from_fn(&[outputs, inputs], |_| F::of(rng.random_range(-a..a))),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Forward over a tensor `[..., in]`.
    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        if x.last_dim() != self.inputs() {
            return Err(invalid!(
                "linear layer expects trailing extent {}, got {:?}",
                self.inputs(),
                x.dims()
            ));
        }
        let mut dims = x.dims().to_vec();
        *dims.last_mut().unwrap() = self.outputs();
        Tensor::new(dims, self.forward_rows(x.data(), x.rows()))
    }

    /// Forward over `rows` contiguous input rows.
    pub fn forward_rows(&self, x: &[F], rows: usize) -> Vec<F> {
        let (n_in, n_out) = (self.inputs(), self.outputs());
        assert_eq!(x.len(), rows * n_in, "linear input length");
        let mut y = Vec::with_capacity(rows * n_out);
        for _ in 0..rows {
            y.extend_from_slice(self.bias.data());
        }
        // y[rows, out] += x[rows, in] . W^T
        unsafe {
            F::gemm(
                rows,
                n_in,
                n_out,
                F::one(),
                x.as_ptr(),
                n_in as isize,
                1,
                self.weight.data().as_ptr(),
                1,
                n_in as isize,
                F::one(),
                y.as_mut_ptr(),
                n_out as isize,
                1,
            );
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(&self, x: &[F], dy: &[F], rows: usize, grad: &mut LinearLayer<F>) -> Vec<F> {
        self.backward_params(x, dy, rows, grad);
        self.backward_input(dy, rows)
    }

    pub fn backward_params(&self, x: &[F], dy: &[F], rows: usize, grad: &mut LinearLayer<F>) {
        let (n_in, n_out) = (self.inputs(), self.outputs());
        assert_eq!(x.len(), rows * n_in, "linear input length");
        assert_eq!(dy.len(), rows * n_out, "linear output gradient length");
        // dW[out, in] += dy^T . x
        unsafe {
            F::gemm(
                n_out,
                rows,
                n_in,
                F::one(),
                dy.as_ptr(),
                1,
                n_out as isize,
                x.as_ptr(),
                n_in as isize,
                1,
                F::one(),
                grad.weight.data_mut().as_mut_ptr(),
                n_in as isize,
                1,
            );
        }
        let db = grad.bias.data_mut();
        for r in 0..rows {
            for (b, &g) in db.iter_mut().zip(&dy[r * n_out..(r + 1) * n_out]) {
                *b += g;
            }
        }
    }

    pub fn backward_input(&self, dy: &[F], rows: usize) -> Vec<F> {
        let (n_in, n_out) = (self.inputs(), self.outputs());
        let mut dx = vec![F::zero(); rows * n_in];
        // dx[rows, in] = dy[rows, out] . W[out, in]
        unsafe {
            F::gemm(
                rows,
                n_out,
                n_in,
                F::one(),
                dy.as_ptr(),
                n_out as isize,
                1,
                self.weight.data().as_ptr(),
                n_in as isize,
                1,
                F::zero(),
                dx.as_mut_ptr(),
                n_in as isize,
                1,
            );
        }
        dx
    }
}

/// Free-function form of [`LinearLayer::forward`].
pub fn linear_forward<F: Scalar>(layer: &LinearLayer<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    layer.forward(x)
}
