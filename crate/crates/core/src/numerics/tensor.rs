use crate::error::{invalid, Result};

use super::Scalar;

/// Dense row-major tensor. No strides, no views.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    dims: Vec<usize>,
    data: Vec<F>,
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(invalid!("tensor needs at least one dimension"));
    }
    if let Some(pos) = dims.iter().position(|&d| d == 0) {
        return Err(invalid!("tensor extent {pos} is zero in {dims:?}"));
    }
    Ok(dims.iter().product())
}

impl<F: Scalar> Tensor<F> {
    pub fn new(dims: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n = check_dims(&dims)?;
        if n != data.len() {
            return Err(invalid!("dims {dims:?} need {n} elements, got {}", data.len()));
        }
        Ok(Self { dims, data })
    }

    /// Panics on an invalid shape; for shapes fixed by construction.
    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, F::zero())
    }

    pub fn full(dims: &[usize], value: F) -> Self {
        let n = check_dims(dims).expect("valid tensor shape");
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let n = check_dims(dims).expect("valid tensor shape");
        Self {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn from_f64(dims: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(dims.to_vec(), values.iter().map(|&v| F::of(v)).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn last_dim(&self) -> usize {
        *self.dims.last().expect("non-empty dims")
    }

    /// Number of rows when viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.last_dim();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn fill(&mut self, value: F) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: F, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(invalid!("shape mismatch {:?} vs {:?}", self.dims, other.dims));
        }
        super::axpy(alpha, &other.data, &mut self.data);
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| G::of(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<F: Scalar> std::ops::Index<usize> for Tensor<F> {
    type Output = F;

    fn index(&self, i: usize) -> &F {
        &self.data[i]
    }
}

impl<F: Scalar> std::ops::IndexMut<usize> for Tensor<F> {
    fn index_mut(&mut self, i: usize) -> &mut F {
        &mut self.data[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn rows_view_last_axis() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 2], |i| i as f64);
        assert_eq!(t.rows(), 6);
        assert_eq!(t.row(4), &[8.0, 9.0]);
    }
}
