//! Optimizers over the flattened parameter vector.

use crate::numerics::{Params, Scalar};

/// Scales `grad` so that its global norm is at most `max_norm`; returns the norm before scaling.
pub fn clip_grad_norm<F: Scalar, P: Params<F>>(grad: &mut P, max_norm: f64) -> f64 {
    let norm = grad.sq_norm().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = F::of(max_norm / norm);
        grad.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v *= s));
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<F: Scalar, P: Params<F>>(&mut self, params: &mut P, grad: &P) {
        let g = grad.flatten();
        if self.m.len() != g.len() {
            self.m = vec![0.0; g.len()];
            self.v = vec![0.0; g.len()];
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut i = 0;
        params.visit_mut("", &mut |_, t| {
            for p in t.data_mut() {
                let gi = g[i].as_f64();
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * gi;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
                let x = p.as_f64();
                *p = F::of(x - self.lr * (update + self.weight_decay * x));
                i += 1;
            }
        });
    }
}

/// Plain stochastic gradient descent with L2 weight decay.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn step<F: Scalar, P: Params<F>>(&self, params: &mut P, grad: &P) {
        let g = grad.flatten();
        let mut i = 0;
        params.visit_mut("", &mut |_, t| {
            for p in t.data_mut() {
                let x = p.as_f64();
                *p = F::of(x - self.lr * (g[i].as_f64() + self.weight_decay * x));
                i += 1;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::LinearLayer;

    fn quadratic_grad(p: &LinearLayer<f64>) -> LinearLayer<f64> {
        // gradient of 0.5 |theta - 1|^2
        let mut g = p.clone();
        g.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v -= 1.0));
        g
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = LinearLayer::<f64>::zeros(2, 3);
        let mut opt = AdamW::new(0.01, 0.0);
        let g = quadratic_grad(&p);
        opt.step(&mut p, &g);
        for v in p.flatten() {
            assert!((v - 0.01).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn both_minimize_a_quadratic() {
        let mut a = LinearLayer::<f64>::zeros(2, 3);
        let mut s = a.clone();
        let mut adam = AdamW::new(0.05, 0.0);
        let sgd = Sgd {
            lr: 0.1,
            weight_decay: 0.0,
        };
        for _ in 0..400 {
            let g = quadratic_grad(&a);
            adam.step(&mut a, &g);
            let g = quadratic_grad(&s);
            sgd.step(&mut s, &g);
        }
        assert!(a.flatten().iter().all(|v| (v - 1.0).abs() < 1e-2));
        assert!(s.flatten().iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = LinearLayer::<f64>::zeros(2, 2);
        g.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = 3.0));
        let before = clip_grad_norm(&mut g, 0.1);
        assert!((before - 3.0 * 6f64.sqrt()).abs() < 1e-12);
        assert!((g.sq_norm().sqrt() - 0.1).abs() < 1e-12);
    }
}
