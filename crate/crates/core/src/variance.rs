//! Exact randomization variance, its unbiased estimator, and the placebo
//! variance estimator.
//!
//! Under uniform unit assignment the mean squared error of a weight slice at
//! period `t` is `(1/N) Σ_i (M_i0t + Σ_j M_ijt Y_jt(0))²`; for column-balanced
//! families this is the variance. [`unbiased_variance_estimate`] estimates it
//! from the control outcomes of a single realized assignment, and averages to
//! the exact value over the assignment distribution for any weight tensor.

use crate::error::{Error, Result};
use crate::numfmt::json_f64;
use crate::panel::{Assignment, Panel};
use crate::weights::{solve_weights, PeriodScope, WeightSetSpec, WeightSlice, WeightTensor};
use nalgebra::DMatrix;
use serde_json::{json, Value};

/// `(1/N) Σ_i (M_i0t + Σ_j M_ijt Y_jt(0))²`.
pub fn exact_variance(y0: &DMatrix<f64>, tensor: &WeightTensor, t: usize) -> Result<f64> {
    let sl = tensor.slice_checked(t)?;
    if y0.nrows() != tensor.n_units || t >= y0.ncols() {
        return Err(Error::Dimension("outcome matrix does not match the tensor".into()));
    }
    Ok(slice_exact_variance(y0, sl, t))
}

pub(crate) fn slice_exact_variance(y0: &DMatrix<f64>, sl: &WeightSlice, t: usize) -> f64 {
    let n = y0.nrows();
    (0..n).map(|i| sl.apply(i, |j| y0[(j, t)]).powi(2)).sum::<f64>() / n as f64
}

/// Unbiased estimate of [`exact_variance`] from the outcomes of the controls.
///
/// With `i` the treated unit, `t` the treated period and `d_kj = Y_kt − Y_jt`:
///
/// ```text
///   1/(N−3)        Σ_{k≠i} (Σ_{j≠i} M_kj d_kj)²
/// − 1/((N−2)(N−3)) Σ_{k≠i} Σ_{j≠i} M_kj² d_kj²
/// − 2/(N−2)        Σ_{k≠i} M_k0 Σ_{j≠i} M_kj d_kj
/// + 1/N            Σ_k M_k0²
/// ```
///
/// The estimate can be negative except for DiM weights.
pub fn unbiased_variance_estimate(panel: &Panel, tensor: &WeightTensor, a: &Assignment) -> Result<f64> {
    let n = panel.n_units();
    if n < 4 {
        return Err(Error::UnsupportedSize(format!(
            "the unbiased variance estimator divides by N - 3 and needs N >= 4, got N = {n}"
        )));
    }
    a.check(n, panel.n_periods())?;
    let i = a.unit().ok_or_else(|| Error::Invalid("use the multitreat variance for several treated units".into()))?;
    let t = a.treated_period();
    let sl = tensor.slice_checked(t)?;
    let y = panel.y().column(t);
    Ok(prop1(sl, |k| y[k], i, n))
}

pub(crate) fn prop1(sl: &WeightSlice, y: impl Fn(usize) -> f64, i: usize, n: usize) -> f64 {
    let nf = n as f64;
    let (mut sq, mut diag, mut cross) = (0.0, 0.0, 0.0);
    for k in (0..n).filter(|&k| k != i) {
        let yk = y(k);
        let mut inner = 0.0;
        for j in (0..n).filter(|&j| j != i) {
            let term = sl.w[(k, j)] * (yk - y(j));
            inner += term;
            diag += term * term;
        }
        sq += inner * inner;
        cross -= sl.intercept[k] * inner;
    }
    let icpt: f64 = sl.intercept.iter().map(|c| c * c).sum();
    sq / (nf - 3.0) - diag / ((nf - 2.0) * (nf - 3.0)) + 2.0 * cross / (nf - 2.0) + icpt / nf
}

/// Spec to refit on the panel without `drop`: propensities are restricted and renormalized.
fn reduced_spec(spec: &WeightSetSpec, drop: usize) -> Result<WeightSetSpec> {
    match &spec.propensity {
        None => Ok(spec.clone()),
        Some(p) => {
            let rest: Vec<f64> = p.iter().enumerate().filter(|&(k, _)| k != drop).map(|(_, &v)| v).collect();
            let s: f64 = rest.iter().sum();
            if s <= 0.0 {
                return Err(Error::Invalid("no propensity mass left after removing the treated unit".into()));
            }
            let mut q: Vec<f64> = rest.iter().map(|v| v / s).collect();
            let drift = 1.0 - q.iter().sum::<f64>();
            if let Some(m) = q.iter_mut().max_by(|a, b| a.total_cmp(b)) {
                *m += drift;
            }
            Ok(WeightSetSpec { family: spec.family, propensity: Some(q) })
        }
    }
}

/// Placebo variance: drop the treated unit, refit the same family on the
/// remaining `N − 1` units over the non-treated periods, and average the
/// squared placebo estimates of the controls at the treated period.
pub fn placebo_variance_estimate(panel: &Panel, spec: &WeightSetSpec, a: &Assignment) -> Result<f64> {
    let n = panel.n_units();
    a.check(n, panel.n_periods())?;
    let i = a.unit().ok_or_else(|| Error::Invalid("placebo variance needs a single treated unit".into()))?;
    if n < 3 {
        return Err(Error::UnsupportedSize(format!("placebo variance needs N >= 3, got {n}")));
    }
    let inner = reduced_spec(spec, i)?;
    if n - 1 < spec.family.min_units() {
        return Err(Error::UnsupportedSize(format!(
            "placebo refit of family {} on N - 1 = {} units is not defined (needs {})",
            spec.family,
            n - 1,
            spec.family.min_units()
        )));
    }
    let t = a.treated_period();
    let sub = panel.without_unit(i)?;
    let tensor = solve_weights(&sub, &inner, PeriodScope::Single(t))?;
    Ok(slice_exact_variance(sub.y(), tensor.slice(t).unwrap(), t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    /// Requires control potential outcomes for every unit.
    pub exact: Option<f64>,
    pub unbiased_estimate: f64,
    pub placebo_estimate: Option<f64>,
    pub n_units: usize,
    pub treated_period: usize,
    pub family: WeightSetSpec,
    /// Whether a non-negative truncation was applied to `unbiased_estimate`.
    pub truncated: bool,
}

impl VarianceReport {
    /// `sqrt(max(unbiased_estimate, 0))`.
    pub fn standard_error(&self) -> f64 {
        self.unbiased_estimate.max(0.0).sqrt()
    }

    pub fn is_negative(&self) -> bool {
        self.unbiased_estimate < 0.0
    }

    pub fn to_json(&self, panel: &Panel) -> Value {
        json!({
            "family": self.family.family.name(),
            "n_units": self.n_units,
            "treated_period": panel.periods()[self.treated_period],
            "exact": self.exact.map_or(Value::Null, json_f64),
            "unbiased_estimate": json_f64(self.unbiased_estimate),
            "negative_estimate": self.is_negative(),
            "truncated": self.truncated,
            "standard_error": json_f64(self.standard_error()),
            "placebo_estimate": self.placebo_estimate.map_or(Value::Null, json_f64),
            "placebo_standard_error": self.placebo_estimate.map_or(Value::Null, |v| json_f64(v.max(0.0).sqrt())),
        })
    }
}

/// Options for [`variance_report`].
#[derive(Debug, Clone, Copy, Default)]
pub struct VarianceOptions {
    pub placebo: bool,
    /// Clamp a negative unbiased estimate at zero (breaks unbiasedness).
    pub truncate_negative: bool,
}

/// Collect the variance quantities for one assignment. `y0` supplies the
/// control potential outcomes when they are known (simulation).
pub fn variance_report(
    panel: &Panel,
    tensor: &WeightTensor,
    a: &Assignment,
    y0: Option<&DMatrix<f64>>,
    opts: VarianceOptions,
) -> Result<VarianceReport> {
    let mut est = unbiased_variance_estimate(panel, tensor, a)?;
    let mut truncated = false;
    if opts.truncate_negative && est < 0.0 {
        est = 0.0;
        truncated = true;
    }
    let t = a.treated_period();
    Ok(VarianceReport {
        exact: y0.map(|y| exact_variance(y, tensor, t)).transpose()?,
        unbiased_estimate: est,
        placebo_estimate: if opts.placebo { Some(placebo_variance_estimate(panel, &tensor.spec, a)?) } else { None },
        n_units: panel.n_units(),
        treated_period: t,
        family: tensor.spec.clone(),
        truncated,
    })
}
