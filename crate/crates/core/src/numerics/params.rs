//! Named traversal over learnable tensors.
//!
//! Every parameter struct implements [`Params`]; gradients use the same
//! struct type, so optimizers, checkpoints and gradient checks can walk a
//! model and its gradient in lock step.

use crate::error::{invalid, Result};

use super::{Scalar, Tensor};

pub trait Params<F: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<F>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<F>));

    fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name.to_string(), t)));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn fill_zero(&mut self) {
        self.visit_mut("", &mut |_, t| t.fill(F::zero()));
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    /// All parameter values, flattened in visit order.
    fn flatten(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    /// Overwrites all values from a flat slice in visit order.
    fn assign_flat(&mut self, values: &[F]) -> Result<()> {
        let total = self.num_params();
        if values.len() != total {
            return Err(invalid!(
                "flat parameter vector has {} values, model needs {total}",
                values.len()
            ));
        }
        let mut offset = 0;
        self.visit_mut("", &mut |_, t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        });
        Ok(())
    }

    /// Copies values from a structurally identical parameter set of another precision.
    fn copy_from<G: Scalar, P: Params<G>>(&mut self, other: &P) -> Result<()> {
        let mut src = Vec::new();
        other.visit("", &mut |name, t| {
            src.push((name.to_string(), t.dims().to_vec(), t.data()))
        });
        let mut idx = 0;
        let mut err = None;
        self.visit_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match src.get(idx) {
                Some((n, dims, data)) if n == name && dims.as_slice() == t.dims() => {
                    for (d, s) in t.data_mut().iter_mut().zip(data.iter()) {
                        *d = F::of(s.as_f64());
                    }
                }
                _ => err = Some(invalid!("parameter '{name}' has no matching source tensor")),
            }
            idx += 1;
        });
        match err {
            Some(e) => Err(e),
            None if idx != src.len() => Err(invalid!("parameter count mismatch: {idx} vs {}", src.len())),
            None => Ok(()),
        }
    }

    /// `self += alpha * other` tensor by tensor.
    fn add_scaled(&mut self, alpha: F, other: &Self)
    where
        Self: Sized,
    {
        let mut src = Vec::new();
        other.visit("", &mut |_, t| src.push(t));
        let mut i = 0;
        self.visit_mut("", &mut |_, t| {
            t.add_scaled(alpha, src[i]).expect("identical structure");
            i += 1;
        });
    }

    fn sq_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit("", &mut |_, t| {
            s += t.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>()
        });
        s
    }
}

pub fn join_name(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

impl<F: Scalar> Params<F> for Tensor<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<F>)) {
        f(prefix, self)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        f(prefix, self)
    }
}

impl<F: Scalar, P: Params<F>> Params<F> for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<F>)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join_name(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join_name(prefix, &i.to_string()), f);
        }
    }
}

/// Implements [`Params`] for a struct generic over `F` by visiting the listed fields.
#[macro_export]
macro_rules! impl_params {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<F: $crate::numerics::Scalar> $crate::numerics::Params<F> for $ty<F> {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &'a $crate::numerics::Tensor<F>),
            ) {
                $( $crate::numerics::Params::visit(
                    &self.$field,
                    &$crate::numerics::params::join_name(prefix, stringify!($field)),
                    f,
                ); )*
            }

            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &mut $crate::numerics::Tensor<F>),
            ) {
                $( $crate::numerics::Params::visit_mut(
                    &mut self.$field,
                    &$crate::numerics::params::join_name(prefix, stringify!($field)),
                    f,
                ); )*
            }
        }
    };
}
