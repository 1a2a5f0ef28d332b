//! Central-difference gradient checking for hand-written backward passes.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

use super::{Params, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub probes: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }

    fn merge(self, other: Self) -> Self {
        let worse = if other.max_rel_error > self.max_rel_error {
            other
        } else {
            self
        };
        Self {
            probes: self.probes + other.probes,
            ..worse
        }
    }
}

/// Compares `analytic` against central differences of `f` at `theta`.
///
/// `indices` restricts probing to a subset of coordinates; `None` probes all.
pub fn grad_check(
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
    theta: &Tensor<f64>,
    analytic: &Tensor<f64>,
    h: f64,
    indices: Option<&[usize]>,
) -> Result<GradCheckReport> {
    if theta.dims() != analytic.dims() {
        return Err(invalid!(
            "analytic gradient {:?} does not match parameters {:?}",
            analytic.dims(),
            theta.dims()
        ));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid!("finite-difference step must be positive, got {h}"));
    }
    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..theta.len()).collect();
            &all
        }
    };
    let mut probe = theta.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        probes: 0,
    };
    for &i in indices {
        if i >= theta.len() {
            return Err(invalid!("probe index {i} out of range {}", theta.len()));
        }
        let x = theta[i];
        probe[i] = x + h;
        let plus = f(&probe)?;
        probe[i] = x - h;
        let minus = f(&probe)?;
        probe[i] = x;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                index: i,
                detail: format!("f(theta+h)={plus}, f(theta-h)={minus}"),
            });
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        if !a.is_finite() {
            return Err(Error::NonFinite {
                index: i,
                detail: format!("analytic gradient {a}"),
            });
        }
        let rel = (a - numeric).abs() / numeric.abs().max(1.0);
        report.probes += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}

/// Evenly spaced probe indices, at most `max_probes` of them.
pub fn probe_indices(len: usize, max_probes: usize) -> Vec<usize> {
    if len <= max_probes {
        return (0..len).collect();
    }
    let stride = len as f64 / max_probes as f64;
    (0..max_probes).map(|j| ((j as f64 + 0.5) * stride) as usize).collect()
}

/// Gradient check of every tensor in a parameter set whose name starts with `group`.
pub fn check_param_group<P>(
    params: &P,
    analytic: &P,
    group: &str,
    max_probes_per_tensor: usize,
    h: f64,
    mut loss: impl FnMut(&P) -> Result<f64>,
) -> Result<GradCheckReport>
where
    P: Params<f64> + Clone,
{
    let flat = params.flatten();
    let grads = analytic.flatten();
    let mut ranges = Vec::new();
    let mut offset = 0;
    params.visit("", &mut |name, t| {
        if name.starts_with(group) {
            ranges.push((offset, t.len()));
        }
        offset += t.len();
    });
    if ranges.is_empty() {
        return Err(invalid!("no parameters under '{group}'"));
    }
    let mut indices = Vec::new();
    for (start, len) in ranges {
        indices.extend(probe_indices(len, max_probes_per_tensor).into_iter().map(|i| start + i));
    }
    let theta = Tensor::new(vec![flat.len()], flat)?;
    let analytic = Tensor::new(vec![grads.len()], grads)?;
    let mut scratch = params.clone();
    grad_check(
        |t| {
            scratch.assign_flat(t.data())?;
            loss(&scratch)
        },
        &theta,
        &analytic,
        h,
        Some(&indices),
    )
}

/// Combines reports, keeping the worst error.
pub fn worst(reports: impl IntoIterator<Item = GradCheckReport>) -> Option<GradCheckReport> {
    reports.into_iter().reduce(GradCheckReport::merge)
}
