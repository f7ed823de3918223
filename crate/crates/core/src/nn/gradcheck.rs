use ndarray::{Array2, ArrayView2};

use super::Network;
use crate::error::Result;
use crate::parallel::Parallelism;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Parameters whose ±[`FD_STEP`] probe moves any relu pre-activation across
/// zero, or brings one within this distance of it, are skipped.
pub const KINK_TOLERANCE: f64 = 1e-6;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// max over checked parameters of |a − n| / max(1e-8, |a| + |n|)
    pub max_rel_error: f64,
    /// Flat index of the parameter attaining the maximum.
    pub worst: Option<usize>,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    /// Combine two checks over disjoint parameter sets.
    pub fn merge(self, other: GradCheck) -> GradCheck {
        let (max_rel_error, worst) = if other.max_rel_error > self.max_rel_error {
            (other.max_rel_error, other.worst)
        } else {
            (self.max_rel_error, self.worst)
        };
        GradCheck { max_rel_error, worst, checked: self.checked + other.checked, skipped: self.skipped + other.skipped }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// One evaluation of a perturbed objective.
/// Rounding in a loss of magnitude `L` limits central differences to about
/// `FD_NOISE_ULPS * eps * L / h` absolute resolution.
pub const FD_NOISE_ULPS: f64 = 16.0;

/// Relative error whose denominator never drops below `floor`.
pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

/// Denominator floor at which an absolute error of one FD noise unit reads
/// as relative error `tol`: entries the differences cannot resolve are held
/// to an absolute bound instead.
pub fn resolution_floor(loss: f64, tol: f64) -> f64 {
    (FD_NOISE_ULPS * f64::EPSILON * loss.abs().max(1.0) / FD_STEP / tol).max(1e-8)
}

pub const RESOLUTION_TOL: f64 = 1e-4;

pub struct Probe {
    pub loss: f64,
    /// Relu activity pattern; a change between the + and − probes marks a kink.
    pub pattern: Vec<bool>,
    /// Smallest |pre-activation| over relu units.
    pub margin: f64,
}

/// Central-difference check of `analytic` against `eval` over `n` parameters.
///
/// `eval(i, delta)` evaluates the objective with parameter `i` shifted by
/// `delta`.
pub fn check_parameters<F>(par: Parallelism, analytic: &[f64], eval: F) -> GradCheck
where
    F: Fn(usize, f64) -> Probe + Sync + Send,
{
    let per: Vec<Option<f64>> = par.map_range(analytic.len(), |i| {
        let plus = eval(i, FD_STEP);
        let minus = eval(i, -FD_STEP);
        if plus.pattern != minus.pattern || plus.margin < KINK_TOLERANCE || minus.margin < KINK_TOLERANCE {
            return None;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * FD_STEP);
        let floor = resolution_floor(plus.loss.abs().max(minus.loss.abs()), RESOLUTION_TOL);
        Some(relative_error_floored(analytic[i], numeric, floor))
    });
    let mut out = GradCheck { max_rel_error: 0.0, worst: None, checked: 0, skipped: 0 };
    for (i, r) in per.into_iter().enumerate() {
        match r {
            Some(r) => {
                out.checked += 1;
                if out.worst.is_none() || r > out.max_rel_error {
                    out.max_rel_error = r;
                    out.worst = Some(i);
                }
            }
            None => out.skipped += 1,
        }
    }
    out
}

/// Check `net`'s backward pass on input `x` against central differences of
/// `loss`, which maps network outputs to (value, dvalue/doutput).
pub fn grad_check<L>(net: &Network, loss: L, x: ArrayView2<f64>) -> Result<GradCheck>
where
    L: Fn(&Array2<f64>) -> (f64, Array2<f64>) + Sync + Send,
{
    grad_check_with(Parallelism::default(), net, loss, x)
}

pub fn grad_check_with<L>(par: Parallelism, net: &Network, loss: L, x: ArrayView2<f64>) -> Result<GradCheck>
where
    L: Fn(&Array2<f64>) -> (f64, Array2<f64>) + Sync + Send,
{
    let (y, cache) = net.forward(x)?;
    let (_, dy) = loss(&y);
    let (grads, _) = net.backward(&cache, dy.view())?;
    let analytic: Vec<f64> = grads.iter().collect();
    let x = x.to_owned();
    Ok(check_parameters(par, &analytic, |i, delta| {
        let mut probe = net.clone();
        probe.set_param(i, net.param(i) + delta);
        let (y, cache) = probe.forward(x.view()).expect("shape checked above");
        Probe { loss: loss(&y).0, pattern: probe.relu_pattern(&cache), margin: probe.min_relu_margin(&cache) }
    }))
}
