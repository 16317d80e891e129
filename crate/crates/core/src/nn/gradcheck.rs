//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::{Module, Param};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error, so entries whose true gradient
/// is zero are judged by absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub worst: Option<String>,
}

impl GradCheckReport {
    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        self.checked += 1;
        self.max_abs_error = self.max_abs_error.max(abs);
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some(format!("{} analytic={analytic:.6e} numeric={numeric:.6e}", label()));
        }
    }

    pub fn merge(mut self, other: GradCheckReport) -> Self {
        self.checked += other.checked;
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        if other.max_rel_error >= self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst.or(self.worst);
        }
        self
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("forward pass"))
    }
}

/// Compares `analytic` against central differences of `f` at `point` for the
/// listed coordinates.
pub fn grad_check(
    point: &[f64],
    analytic: &[f64],
    indices: &[usize],
    step: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Result<GradCheckReport> {
    assert_eq!(point.len(), analytic.len());
    finite(f(point))?;
    let mut x = point.to_vec();
    let mut report = GradCheckReport::default();
    for &i in indices {
        let orig = x[i];
        x[i] = orig + step;
        let plus = finite(f(&x))?;
        x[i] = orig - step;
        let minus = finite(f(&x))?;
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        report.record(|| format!("[{i}]"), analytic[i], numeric);
    }
    Ok(report)
}

fn with_param<M: Module<f64>>(m: &mut M, index: usize, f: &mut dyn FnMut(&mut Param<f64>)) {
    let mut k = 0;
    m.visit_mut("", &mut |_, p| {
        if k == index {
            f(p);
        }
        k += 1;
    });
}

/// Checks every parameter of `module`, sampling up to `per_param` entries
/// from each.
///
/// `loss(module, backward)` must return the scalar loss and, when
/// `backward` is true, accumulate its gradient into the parameters.
pub fn grad_check_params<M, R, F>(
    module: &mut M,
    per_param: usize,
    rng: &mut R,
    mut loss: F,
) -> Result<GradCheckReport>
where
    M: Module<f64>,
    R: Rng + ?Sized,
    F: FnMut(&mut M, bool) -> Result<f64>,
{
    module.zero_grad();
    finite(loss(module, true)?)?;
    let mut params: Vec<(String, Vec<f64>)> = Vec::new();
    module.visit("", &mut |name, p| {
        params.push((name.to_string(), p.grad.as_slice().to_vec()))
    });

    let mut report = GradCheckReport::default();
    for (pi, (name, grad)) in params.iter().enumerate() {
        let picks = sample(rng, grad.len(), per_param.min(grad.len())).into_vec();
        for e in picks {
            let mut orig = 0.0;
            with_param(module, pi, &mut |p| {
                orig = p.value.as_slice()[e];
                p.value.as_mut_slice()[e] = orig + FD_STEP;
            });
            let plus = finite(loss(module, false)?)?;
            with_param(module, pi, &mut |p| p.value.as_mut_slice()[e] = orig - FD_STEP);
            let minus = finite(loss(module, false)?)?;
            with_param(module, pi, &mut |p| p.value.as_mut_slice()[e] = orig);
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            report.record(|| format!("{name}[{e}]"), grad[e], numeric);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_and_nan_is_reported() {
        let p = [1.0, -2.0, 0.5];
        let g = [2.0, -4.0, 1.0];
        let r = grad_check(&p, &g, &[0, 1, 2], FD_STEP, |x| x.iter().map(|v| v * v).sum()).unwrap();
        assert!(r.passes(1e-6), "{r:?}");
        let bad = [2.0, -4.0, 3.0];
        let r = grad_check(&p, &bad, &[0, 1, 2], FD_STEP, |x| x.iter().map(|v| v * v).sum()).unwrap();
        assert!(!r.passes(1e-4));
        let err = grad_check(&p, &g, &[0], FD_STEP, |_| f64::NAN).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
