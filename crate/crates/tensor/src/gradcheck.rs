//! Central finite-difference verification of autodiff gradients.
//!
//! The loss is evaluated at `x ± ε` per element and differenced in `f64`.
//! Elements whose perturbation crosses a kink (a relu sign flip, a different
//! pooling winner, ...) are skipped, since the numeric derivative there does
//! not estimate the one-sided gradient autodiff reports.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so elements whose true
    /// gradient is zero are judged on absolute error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-3,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCheckStatus {
    Pass,
    Fail,
    /// The function contains straight-through ops whose gradient is defined
    /// rather than numeric; errors are reported but not judged.
    ExcludedSte,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Per-element relative error; `None` for elements skipped at a kink.
    pub rel_errors: Vec<Option<f64>>,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub skipped_kinks: usize,
    pub status: GradCheckStatus,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.status == GradCheckStatus::Pass
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<T, F>(f: &F, point: Tensor<T>) -> Result<(f64, u64)>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(point);
    let loss = f(&mut g, x)?;
    let value = g.value(loss).item().map(Real::as_f64).unwrap_or(f64::NAN);
    Ok((value, g.kink_signature()))
}

/// Compares the autodiff gradient of scalar `f` at `point` against central
/// differences with the given tolerance.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    grad_check_with(
        f,
        point,
        GradCheckOptions {
            eps,
            tol,
            ..GradCheckOptions::default()
        },
    )
}

pub fn grad_check_with<T, F>(
    f: F,
    point: &Tensor<T>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let loss = f(&mut g, x)?;
    g.backward(loss)?;
    let analytic: Vec<f64> = match g.grad(x) {
        Some(grad) => grad.data().iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; point.numel()],
    };
    let base_sig = g.kink_signature();
    let has_ste = g.contains_ste();

    let mut numeric = Vec::with_capacity(point.numel());
    let mut rel_errors = Vec::with_capacity(point.numel());
    let mut skipped = 0;
    for (i, &a) in analytic.iter().enumerate() {
        let shifted = |delta: f64| {
            let mut p = point.clone();
            let v = &mut p.data_mut()[i];
            *v = T::of(v.as_f64() + delta);
            p
        };
        let (plus, sig_plus) = evaluate(&f, shifted(opts.eps))?;
        let (minus, sig_minus) = evaluate(&f, shifted(-opts.eps))?;
        let n = (plus - minus) / (2.0 * opts.eps);
        numeric.push(n);
        if !has_ste && (sig_plus != base_sig || sig_minus != base_sig) {
            skipped += 1;
            rel_errors.push(None);
        } else {
            rel_errors.push(Some(relative_error(a, n, opts.floor)));
        }
    }
    let judged: Vec<f64> = rel_errors.iter().flatten().copied().collect();
    let max_rel_error = judged.iter().copied().fold(0.0, f64::max);
    let mean_rel_error = if judged.is_empty() {
        0.0
    } else {
        judged.iter().sum::<f64>() / judged.len() as f64
    };
    let status = if has_ste {
        GradCheckStatus::ExcludedSte
    } else if max_rel_error < opts.tol && max_rel_error.is_finite() {
        GradCheckStatus::Pass
    } else {
        GradCheckStatus::Fail
    };
    Ok(GradCheckReport {
        analytic,
        numeric,
        rel_errors,
        max_rel_error,
        mean_rel_error,
        skipped_kinks: skipped,
        status,
    })
}
