//! Point estimates, estimands and bias.

use crate::error::{Error, Result};
use crate::numfmt::json_f64;
use crate::panel::{Assignment, Panel, PotentialPanel};
use crate::qp::QpOptions;
use crate::weights::Family;
use crate::weights::{coupled_program, Objective, Program, WeightSetSpec, WeightSlice, WeightTensor};
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

/// What an estimate is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimand {
    /// Effect for the treated unit(s) in the treated period.
    Treated,
    /// Average effect over all units in the treated period.
    Vertical,
    /// Average effect for the treated unit(s) over all periods.
    Horizontal,
    /// Average effect over all units and periods.
    Population,
}

impl Estimand {
    pub fn name(self) -> &'static str {
        match self {
            Estimand::Treated => "treated",
            Estimand::Vertical => "vertical",
            Estimand::Horizontal => "horizontal",
            Estimand::Population => "population",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub estimator_family: WeightSetSpec,
    pub assignment: Assignment,
    pub estimand_target: Estimand,
}

impl Estimate {
    pub fn to_json(&self, panel: &Panel) -> Value {
        let units: Vec<&str> = self.assignment.treated_units().iter().map(|&i| panel.units()[i].as_str()).collect();
        json!({
            "value": json_f64(self.value),
            "family": self.estimator_family.family.name(),
            "treated_units": units,
            "treated_period": panel.periods()[self.assignment.treated_period()],
            "estimand": self.estimand_target.name(),
        })
    }
}

/// `M_i0t + Σ_j M_ijt Y_jt` for the treated unit `i` and period `t`.
pub fn gsc_estimate(panel: &Panel, tensor: &WeightTensor, a: &Assignment) -> Result<Estimate> {
    if tensor.n_units != panel.n_units() || tensor.n_periods != panel.n_periods() {
        return Err(Error::Dimension("tensor and panel sizes differ".into()));
    }
    a.check(panel.n_units(), panel.n_periods())?;
    let i = a
        .unit()
        .ok_or_else(|| Error::Invalid("assignment treats several units; use the multitreat estimator".into()))?;
    let t = a.treated_period();
    let sl = tensor.slice_checked(t)?;
    let y = panel.y();
    Ok(Estimate {
        value: sl.apply(i, |j| y[(j, t)]),
        estimator_family: tensor.spec.clone(),
        assignment: a.clone(),
        estimand_target: match tensor.objective_kind {
            Objective::Standard => Estimand::Treated,
            Objective::Uncorrelated => Estimand::Vertical,
        },
    })
}

/// The four estimands of an assignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimands {
    pub tau: f64,
    pub tau_v: f64,
    pub tau_h: f64,
    pub tau_pop: f64,
}

impl Estimands {
    pub fn get(&self, e: Estimand) -> f64 {
        match e {
            Estimand::Treated => self.tau,
            Estimand::Vertical => self.tau_v,
            Estimand::Horizontal => self.tau_h,
            Estimand::Population => self.tau_pop,
        }
    }
}

/// Treated-cell, period, unit and grand averages of `Y(1) − Y(0)`.
/// With several treated units, `tau` and `tau_h` average over them.
pub fn true_estimands(pp: &PotentialPanel, a: &Assignment) -> Estimands {
    let d = pp.y1() - pp.y0();
    let t = a.treated_period();
    let units = a.treated_units();
    let k = units.len() as f64;
    Estimands {
        tau: units.iter().map(|&i| d[(i, t)]).sum::<f64>() / k,
        tau_v: d.column(t).mean(),
        tau_h: units.iter().map(|&i| d.row(i).mean()).sum::<f64>() / k,
        tau_pop: d.mean(),
    }
}

/// Bias of a weight tensor under uniform unit assignment at period `t`:
/// `(1/N) Σ_i Y_it(0) Σ_j M_jit + (1/N) Σ_j M_j0t`.
///
/// Zero whenever the column sums and the mean intercept vanish.
pub fn exact_sc_bias(y0: &DMatrix<f64>, tensor: &WeightTensor, t: usize) -> Result<f64> {
    let sl = tensor.slice_checked(t)?;
    Ok(slice_bias(y0, sl, t))
}

pub(crate) fn slice_bias(y0: &DMatrix<f64>, sl: &WeightSlice, t: usize) -> f64 {
    let n = y0.nrows();
    let mut acc = sl.intercept.sum();
    for i in 0..n {
        acc += y0[(i, t)] * sl.w.column(i).sum();
    }
    acc / n as f64
}

/// Row `i` fits the all-unit period mean with the other units' outcomes.
pub(crate) fn uncorrelated_program(panel: &Panel, t: usize) -> Program {
    let (n, tt) = (panel.n_units(), panel.n_periods());
    let y = panel.y();
    let fit: Vec<usize> = (0..tt).filter(|&s| s != t).collect();
    let ys: Vec<Vec<f64>> = (0..n).map(|i| fit.iter().map(|&s| y[(i, s)]).collect()).collect();
    let mean: Vec<f64> = fit.iter().map(|&s| y.column(s).mean()).collect();
    let targets = vec![mean; n];
    coupled_program(&ys, &targets, &vec![1.0; n], true)
}

/// MUSC-constrained weights for the vertical estimand when treated and
/// control outcomes are uncorrelated.
///
/// Row `i` minimizes `Σ_{s≠t*} (M_i0 + Ȳ_s + Σ_{j≠i} M_ij Y_js)²`, where `Ȳ_s`
/// is the all-unit mean of period `s`: the treated unit's own treated outcome
/// drops out of the expected loss, so the controls are matched to the period
/// mean instead of to unit `i`. The fit only reads non-treated periods.
pub fn vertical_weights_uncorrelated(panel: &Panel, a: &Assignment) -> Result<WeightTensor> {
    a.check(panel.n_units(), panel.n_periods())?;
    let n = panel.n_units();
    if n < 3 {
        return Err(Error::UnsupportedSize(format!("needs at least 3 units, got {n}")));
    }
    let t = a.treated_period();
    let prog = uncorrelated_program(panel, t);
    let sol = prog.solve(&QpOptions::default())?;
    let mut w = DMatrix::identity(n, n);
    for i in 0..n {
        for ((j, _), &v) in prog.rows[i].regs.iter().zip(&sol.v[i]) {
            w[(i, *j)] = -v;
        }
    }
    let mut tensor = WeightTensor::new(n, panel.n_periods(), WeightSetSpec::new(Family::Musc), Objective::Uncorrelated);
    tensor.set_slice(t, WeightSlice { intercept: DVector::from_vec(sol.intercepts), w });
    tensor.objective_value = sol.objective;
    tensor.kkt_residual = sol.kkt_residual;
    Ok(tensor)
}

/// `Σ_{s≠t*} Σ_i (M_i0 + Ȳ_s + Σ_{j≠i} M_ij Y_js)²` for the slice at the treated period.
pub fn uncorrelated_objective(panel: &Panel, tensor: &WeightTensor, a: &Assignment) -> Result<f64> {
    let t = a.treated_period();
    let sl = tensor.slice_checked(t)?;
    let (n, tt) = (panel.n_units(), panel.n_periods());
    let y = panel.y();
    let mut total = 0.0;
    for s in (0..tt).filter(|&s| s != t) {
        let mean = y.column(s).mean();
        for i in 0..n {
            let mut e = sl.intercept[i] + mean;
            for j in (0..n).filter(|&j| j != i) {
                e += sl.w[(i, j)] * y[(j, s)];
            }
            total += e * e;
        }
    }
    Ok(total)
}
