//! Weight-set families and the constrained least-squares fit of the GSC
//! weight tensor.
//!
//! For a candidate treated unit `i` and period `t` the estimator is
//! `M_i0t + Σ_j M_ijt Y_jt`. Every family shares the base constraints
//! `M_iit = 1`, `M_ijt ≤ 0` for `j ≠ i` and `Σ_j M_ijt = 0`, and adds its own:
//!
//! | family  | intercept | extra constraint                      |
//! |---------|-----------|---------------------------------------|
//! | DiM     | zero      | off-diagonals all `−1/(N−1)`           |
//! | DiD     | free      | off-diagonals all `−1/(N−1)`           |
//! | SC      | zero      | none                                  |
//! | MSC     | free      | none                                  |
//! | USC     | zero      | column sums `Σ_i M_ijt = 0`           |
//! | MUSC    | free      | column sums `Σ_i M_ijt = 0`           |
//! | MUSC_p  | free      | weighted column sums `Σ_i p_i M_ijt = 0` |
//!
//! Weights for period `t` minimize `Σ_i Σ_{s≠t} (M_i0t + Σ_j M_ijt Y_js)²`
//! (each row weighted by `p_i` for MUSC_p). The outcomes of period `t`
//! itself never enter the fit.
//!
//! ```
//! use gsc::panel::Panel;
//! use gsc::weights::{solve_weights, Family, PeriodScope, WeightSetSpec};
//!
//! // Equidistant units: SC matches the middle unit by averaging its neighbours
//! // and the outer units by copying the middle one.
//! let p = Panel::from_unlabeled(nalgebra::dmatrix![1.0, 1.0; 2.0, 2.0; 3.0, 3.0]).unwrap();
//! let sc = solve_weights(&p, &WeightSetSpec::new(Family::Sc), PeriodScope::Single(1)).unwrap();
//! let m = &sc.slice(1).unwrap().w;
//! assert!((m[(1, 0)] + 0.5).abs() < 1e-9 && (m[(1, 2)] + 0.5).abs() < 1e-9);
//! assert!((m[(0, 1)] + 1.0).abs() < 1e-9);
//! ```

mod program;

pub use program::RIDGE;
pub(crate) use program::{Program, Row};

use crate::error::{Error, Result};
use crate::numfmt::{json_f64, json_vec};
use crate::panel::{check_propensity, write_matrix_csv, Panel};
use crate::qp::{EqRow, QpOptions};
use crate::TOL_FEAS;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde_json::{json, Map, Value};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Dim,
    Did,
    Sc,
    Msc,
    Usc,
    Musc,
    MuscP,
}

impl Family {
    pub const ALL: [Family; 7] =
        [Family::Dim, Family::Did, Family::Sc, Family::Msc, Family::Usc, Family::Musc, Family::MuscP];

    pub fn name(self) -> &'static str {
        match self {
            Family::Dim => "dim",
            Family::Did => "did",
            Family::Sc => "sc",
            Family::Msc => "msc",
            Family::Usc => "usc",
            Family::Musc => "musc",
            Family::MuscP => "musc_p",
        }
    }

    pub fn has_intercept(self) -> bool {
        matches!(self, Family::Did | Family::Msc | Family::Musc | Family::MuscP)
    }

    /// Off-diagonals fixed at `−1/(N−1)`.
    pub fn fixed_weights(self) -> bool {
        matches!(self, Family::Dim | Family::Did)
    }

    /// Column constraints couple all rows of a period.
    pub fn coupled(self) -> bool {
        matches!(self, Family::Usc | Family::Musc | Family::MuscP)
    }

    /// Smallest panel the family is defined on.
    pub fn min_units(self) -> usize {
        if self.coupled() {
            3
        } else {
            2
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Ok(match key.as_str() {
            "dim" => Family::Dim,
            "did" => Family::Did,
            "sc" => Family::Sc,
            "msc" => Family::Msc,
            "usc" => Family::Usc,
            "musc" => Family::Musc,
            "musc_p" | "muscp" => Family::MuscP,
            _ => {
                let valid: Vec<&str> = Family::ALL.iter().map(|f| f.name()).collect();
                return Err(Error::Invalid(format!("unknown family {s:?}; valid families: {}", valid.join(", "))));
            }
        })
    }
}

/// A weight family plus the propensity vector MUSC_p needs.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSetSpec {
    pub family: Family,
    pub propensity: Option<Vec<f64>>,
}

impl WeightSetSpec {
    /// Spec for any family except MUSC_p.
    pub fn new(family: Family) -> Self {
        WeightSetSpec { family, propensity: None }
    }

    pub fn musc_p(p: Vec<f64>) -> Self {
        WeightSetSpec { family: Family::MuscP, propensity: Some(p) }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match (self.family, &self.propensity) {
            (Family::MuscP, Some(p)) => {
                check_propensity(p, n)?;
                let max = p.iter().copied().fold(0.0, f64::max);
                if max > 0.5 + 1e-12 {
                    return Err(Error::Infeasible(format!(
                        "no weights satisfy the weighted column sums when a propensity exceeds 1/2 (max {max})"
                    )));
                }
            }
            (Family::MuscP, None) => return Err(Error::Invalid("family musc_p needs a propensity vector".into())),
            (_, Some(_)) => {
                return Err(Error::Invalid(format!("family {} does not take a propensity vector", self.family)))
            }
            _ => {}
        }
        if n < self.family.min_units() {
            return Err(Error::UnsupportedSize(format!(
                "family {} needs at least {} units, got {n}",
                self.family,
                self.family.min_units()
            )));
        }
        Ok(())
    }

    /// Row weight of unit `i` in the objective.
    pub fn row_weight(&self, i: usize) -> f64 {
        self.propensity.as_ref().map_or(1.0, |p| p[i])
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("family".into(), json!(self.family.name()));
        if let Some(p) = &self.propensity {
            m.insert("propensity".into(), json_vec(p.iter().copied()));
        }
        Value::Object(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeriodScope {
    Single(usize),
    All,
}

impl PeriodScope {
    pub fn periods(self, t: usize) -> Vec<usize> {
        match self {
            PeriodScope::Single(s) => vec![s],
            PeriodScope::All => (0..t).collect(),
        }
    }
}

/// Which least-squares objective a tensor was fitted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// The in-sample fit of every unit's own outcomes.
    Standard,
    /// Each row targets the period average of all units.
    Uncorrelated,
}

/// Intercepts `M_i0t` and weights `M_ijt` for a single period.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSlice {
    pub intercept: DVector<f64>,
    /// `w[(i, j)] = M_ijt`; row `i` is the candidate treated unit.
    pub w: DMatrix<f64>,
}

impl WeightSlice {
    /// `M_i0t + Σ_j M_ijt y_j`.
    pub fn apply(&self, i: usize, y: impl Fn(usize) -> f64) -> f64 {
        let mut acc = self.intercept[i];
        for j in 0..self.w.ncols() {
            acc += self.w[(i, j)] * y(j);
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub n_units: usize,
    pub n_periods: usize,
    pub spec: WeightSetSpec,
    pub objective_kind: Objective,
    slices: Vec<Option<WeightSlice>>,
    /// Objective summed over covered periods.
    pub objective_value: f64,
    /// Largest solver KKT residual over covered periods (normalized units).
    pub kkt_residual: f64,
}

impl WeightTensor {
    pub(crate) fn new(n_units: usize, n_periods: usize, spec: WeightSetSpec, objective_kind: Objective) -> Self {
        WeightTensor {
            n_units,
            n_periods,
            spec,
            objective_kind,
            slices: vec![None; n_periods],
            objective_value: 0.0,
            kkt_residual: 0.0,
        }
    }

    pub fn slice(&self, t: usize) -> Option<&WeightSlice> {
        self.slices.get(t).and_then(Option::as_ref)
    }

    pub fn slice_checked(&self, t: usize) -> Result<&WeightSlice> {
        self.slice(t).ok_or_else(|| {
            Error::Dimension(format!("weight tensor does not cover period {t}; fit it with that period in scope"))
        })
    }

    pub(crate) fn set_slice(&mut self, t: usize, s: WeightSlice) {
        self.slices[t] = Some(s);
    }

    pub fn covered_periods(&self) -> Vec<usize> {
        (0..self.n_periods).filter(|&t| self.slices[t].is_some()).collect()
    }

    /// Check the base constraints and the family-specific ones within `TOL_FEAS`.
    pub fn check_membership(&self) -> Result<()> {
        let n = self.n_units;
        let fail = |t: usize, what: String| Err(Error::Infeasible(format!("period {t}: {what}")));
        for t in self.covered_periods() {
            let s = self.slice(t).unwrap();
            for i in 0..n {
                if s.w[(i, i)] != 1.0 {
                    return fail(t, format!("diagonal weight of unit {i} is {}", s.w[(i, i)]));
                }
                let row: f64 = s.w.row(i).sum();
                if row.abs() > TOL_FEAS {
                    return fail(t, format!("row {i} sums to {row:e}"));
                }
                for j in 0..n {
                    if j != i && s.w[(i, j)] > TOL_FEAS {
                        return fail(t, format!("weight M[{i},{j}] = {} is positive", s.w[(i, j)]));
                    }
                }
            }
            let fam = self.spec.family;
            if !fam.has_intercept() {
                if let Some(i) = (0..n).find(|&i| s.intercept[i] != 0.0) {
                    return fail(t, format!("family {fam} needs zero intercepts, unit {i} has {}", s.intercept[i]));
                }
            }
            if fam.fixed_weights() {
                let target = -1.0 / (n as f64 - 1.0);
                for i in 0..n {
                    for j in 0..n {
                        if i != j && (s.w[(i, j)] - target).abs() > TOL_FEAS {
                            return fail(t, format!("weight M[{i},{j}] differs from {target}"));
                        }
                    }
                }
            }
            if matches!(fam, Family::Usc | Family::Musc) {
                for j in 0..n {
                    let c: f64 = s.w.column(j).sum();
                    if c.abs() > TOL_FEAS {
                        return fail(t, format!("column {j} sums to {c:e}"));
                    }
                }
            }
            if let (Family::MuscP, Some(p)) = (fam, &self.spec.propensity) {
                for j in 0..n {
                    let c: f64 = (0..n).map(|i| p[i] * s.w[(i, j)]).sum();
                    if c.abs() > TOL_FEAS {
                        return fail(t, format!("weighted column {j} sums to {c:e}"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Assemble a tensor from hand-built slices, e.g. to evaluate a weight
    /// matrix that was not produced by the solver.
    pub fn from_slices(spec: WeightSetSpec, n_periods: usize, slices: Vec<(usize, WeightSlice)>) -> Result<Self> {
        let n = slices.first().map(|(_, s)| s.w.nrows()).ok_or_else(|| Error::Invalid("no slices".into()))?;
        let mut t = WeightTensor::new(n, n_periods, spec, Objective::Standard);
        for (p, s) in slices {
            if p >= n_periods || s.w.shape() != (n, n) || s.intercept.len() != n {
                return Err(Error::Dimension(format!("slice for period {p} has the wrong shape")));
            }
            t.set_slice(p, s);
        }
        Ok(t)
    }

    /// JSON document `{family, intercept, w, objective_value, kkt_residual}`
    /// with `intercept[i][t]` and `w[i][j][t]`; uncovered periods are `null`.
    pub fn to_json(&self) -> Value {
        let n = self.n_units;
        let cell = |t: usize, f: &dyn Fn(&WeightSlice) -> f64| self.slice(t).map_or(Value::Null, |s| json_f64(f(s)));
        let intercept: Vec<Value> =
            (0..n).map(|i| Value::Array((0..self.n_periods).map(|t| cell(t, &|s| s.intercept[i])).collect())).collect();
        let w: Vec<Value> = (0..n)
            .map(|i| {
                Value::Array(
                    (0..n)
                        .map(|j| Value::Array((0..self.n_periods).map(|t| cell(t, &|s| s.w[(i, j)])).collect()))
                        .collect(),
                )
            })
            .collect();
        let mut m = Map::new();
        m.insert("family".into(), json!(self.spec.family.name()));
        if let Some(p) = &self.spec.propensity {
            m.insert("propensity".into(), json_vec(p.iter().copied()));
        }
        m.insert("periods_covered".into(), json!(self.covered_periods()));
        m.insert("intercept".into(), Value::Array(intercept));
        m.insert("w".into(), Value::Array(w));
        m.insert("objective_value".into(), json_f64(self.objective_value));
        m.insert("kkt_residual".into(), json_f64(self.kkt_residual));
        Value::Object(m)
    }

    /// One period as `{period, intercept: [..], w: [[..]]}` with panel labels.
    pub fn slice_json(&self, panel: &Panel, t: usize) -> Result<Value> {
        let s = self.slice_checked(t)?;
        Ok(json!({
            "period": panel.periods()[t],
            "units": panel.units(),
            "intercept": json_vec(s.intercept.iter().copied()),
            "w": crate::panel::matrix_json(&s.w),
        }))
    }

    /// CSV of period `t`: one row per candidate treated unit, columns
    /// `intercept` then the unit labels.
    pub fn write_slice_csv<W: Write>(&self, panel: &Panel, t: usize, writer: W) -> Result<()> {
        let s = self.slice_checked(t)?;
        let n = self.n_units;
        let m = DMatrix::from_fn(n, n + 1, |i, c| if c == 0 { s.intercept[i] } else { s.w[(i, c - 1)] });
        let mut cols = vec!["intercept".to_owned()];
        cols.extend(panel.units().iter().cloned());
        write_matrix_csv(writer, "treated", panel.units(), &cols, &m)
    }
}

fn check_dims(panel: &Panel, tensor: &WeightTensor) -> Result<()> {
    if tensor.n_units != panel.n_units() || tensor.n_periods != panel.n_periods() {
        return Err(Error::Dimension(format!(
            "tensor is for a {}x{} panel, panel is {}x{}",
            tensor.n_units,
            tensor.n_periods,
            panel.n_units(),
            panel.n_periods()
        )));
    }
    Ok(())
}

fn check_scope(panel: &Panel, scope: PeriodScope) -> Result<()> {
    if let PeriodScope::Single(t) = scope {
        if t >= panel.n_periods() {
            return Err(Error::Invalid(format!("period {t} out of range 0..{}", panel.n_periods())));
        }
    }
    Ok(())
}

/// Objective `Σ_i π_i Σ_{t ∈ scope} Σ_{s≠t} (M_i0t + Σ_j M_ijt Y_js)²` over covered periods,
/// with `π_i = p_i` for MUSC_p and 1 otherwise.
pub fn objective(panel: &Panel, tensor: &WeightTensor, scope: PeriodScope) -> Result<f64> {
    check_dims(panel, tensor)?;
    check_scope(panel, scope)?;
    let y = panel.y();
    let mut total = 0.0;
    for t in scope.periods(panel.n_periods()) {
        let Some(sl) = tensor.slice(t) else {
            if matches!(scope, PeriodScope::Single(_)) {
                tensor.slice_checked(t)?;
            }
            continue;
        };
        for i in 0..panel.n_units() {
            let pi = tensor.spec.row_weight(i);
            let mut acc = 0.0;
            for s in (0..panel.n_periods()).filter(|&s| s != t) {
                let e = sl.apply(i, |j| y[(j, s)]);
                acc += e * e;
            }
            total += pi * acc;
        }
    }
    Ok(total)
}

/// DiM or DiD weights for every period.
pub fn closed_form_weights(panel: &Panel, family: Family) -> Result<WeightTensor> {
    closed_form_scoped(panel, family, PeriodScope::All)
}

fn closed_form_scoped(panel: &Panel, family: Family, scope: PeriodScope) -> Result<WeightTensor> {
    if !family.fixed_weights() {
        return Err(Error::Invalid(format!("family {family} has no closed form; use solve_weights")));
    }
    check_scope(panel, scope)?;
    let (n, tt) = (panel.n_units(), panel.n_periods());
    let y = panel.y();
    let off = -1.0 / (n as f64 - 1.0);
    let w = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { off });
    let mut tensor = WeightTensor::new(n, tt, WeightSetSpec::new(family), Objective::Standard);
    for t in scope.periods(tt) {
        let intercept = if family == Family::Did {
            DVector::from_fn(n, |i, _| {
                let gaps: f64 = (0..tt)
                    .filter(|&s| s != t)
                    .map(|s| {
                        let others: f64 = (0..n).filter(|&j| j != i).map(|j| y[(j, s)]).sum();
                        y[(i, s)] - others / (n as f64 - 1.0)
                    })
                    .sum();
                -gaps / (tt as f64 - 1.0)
            })
        } else {
            DVector::zeros(n)
        };
        tensor.set_slice(t, WeightSlice { intercept, w: w.clone() });
    }
    tensor.objective_value = objective(panel, &tensor, scope)?;
    Ok(tensor)
}

/// Fit the weight tensor of a family on the requested periods.
pub fn solve_weights(panel: &Panel, spec: &WeightSetSpec, scope: PeriodScope) -> Result<WeightTensor> {
    solve_weights_with(panel, spec, scope, &QpOptions::default())
}

pub fn solve_weights_with(
    panel: &Panel,
    spec: &WeightSetSpec,
    scope: PeriodScope,
    opts: &QpOptions,
) -> Result<WeightTensor> {
    spec.validate(panel.n_units())?;
    check_scope(panel, scope)?;
    if spec.family.fixed_weights() {
        return closed_form_scoped(panel, spec.family, scope);
    }
    let (n, tt) = (panel.n_units(), panel.n_periods());
    let periods = scope.periods(tt);
    let fitted: Vec<Result<(WeightSlice, f64, f64)>> =
        periods.par_iter().map(|&t| fit_period(panel, spec, t, opts)).collect();
    let mut tensor = WeightTensor::new(n, tt, spec.clone(), Objective::Standard);
    for (&t, r) in periods.iter().zip(fitted) {
        let (slice, obj, kkt) = r?;
        tensor.objective_value += obj;
        tensor.kkt_residual = tensor.kkt_residual.max(kkt);
        tensor.set_slice(t, slice);
    }
    Ok(tensor)
}

fn series(panel: &Panel, i: usize, t: usize) -> Vec<f64> {
    let y = panel.y();
    (0..panel.n_periods()).filter(|&s| s != t).map(|s| y[(i, s)]).collect()
}

/// The programs solved for period `t`: one per unit for decoupled families,
/// a single joint program otherwise. Each program's rows carry unit indices
/// through `rows_units`.
pub(crate) fn period_programs(panel: &Panel, spec: &WeightSetSpec, t: usize) -> Vec<(Vec<usize>, Program)> {
    let n = panel.n_units();
    let fam = spec.family;
    let ys: Vec<Vec<f64>> = (0..n).map(|i| series(panel, i, t)).collect();
    if !fam.coupled() {
        return (0..n)
            .map(|i| {
                let regs: Vec<(usize, Vec<f64>)> = (0..n).filter(|&j| j != i).map(|j| (j, ys[j].clone())).collect();
                let k = regs.len();
                let prog = Program {
                    rows: vec![Row { target: ys[i].clone(), regs, weight: 1.0 }],
                    free_intercept: fam.has_intercept(),
                    eq: vec![EqRow { coefs: (0..k).map(|c| (c, 1.0)).collect(), rhs: 1.0 }],
                    start: vec![1.0 / k as f64; k],
                };
                (vec![i], prog)
            })
            .collect();
    }
    let p: Vec<f64> = match &spec.propensity {
        Some(p) => p.clone(),
        None => vec![1.0; n],
    };
    vec![((0..n).collect(), coupled_program(&ys, &ys, &p, fam.has_intercept()))]
}

/// Joint program with row sums and (weighted) column sums. `regressors[j]`
/// is unit `j`'s series, `targets[i]` row `i`'s target.
pub(crate) fn coupled_program(
    regressors: &[Vec<f64>],
    targets: &[Vec<f64>],
    p: &[f64],
    free_intercept: bool,
) -> Program {
    let n = regressors.len();
    let mut rows = Vec::with_capacity(n);
    let mut index = vec![vec![usize::MAX; n]; n];
    let mut k = 0;
    for i in 0..n {
        let mut regs = Vec::new();
        for j in (0..n).filter(|&j| j != i) {
            if p[i] > 0.0 && p[j] == 0.0 {
                continue;
            }
            regs.push((j, regressors[j].clone()));
            index[i][j] = k;
            k += 1;
        }
        rows.push(Row { target: targets[i].clone(), regs, weight: p[i] });
    }
    let mut eq = Vec::with_capacity(2 * n);
    for i in 0..n {
        let coefs = (0..n).filter(|&j| index[i][j] != usize::MAX).map(|j| (index[i][j], 1.0)).collect();
        eq.push(EqRow { coefs, rhs: 1.0 });
    }
    for j in 0..n {
        if p[j] == 0.0 {
            continue;
        }
        let coefs = (0..n).filter(|&i| index[i][j] != usize::MAX && p[i] > 0.0).map(|i| (index[i][j], p[i])).collect();
        eq.push(EqRow { coefs, rhs: p[j] });
    }
    let start = circle_start(p);
    let mut x0 = vec![0.0; k];
    for i in 0..n {
        for j in 0..n {
            if index[i][j] != usize::MAX {
                x0[index[i][j]] = start[(i, j)];
            }
        }
    }
    Program { rows, free_intercept, eq, start: x0 }
}

/// Length of the overlap between the circular arc `[a, a + len)` (mod 1) and `[c, c + w)`.
fn arc_overlap(a: f64, len: f64, c: f64, w: f64) -> f64 {
    let a = a.rem_euclid(1.0);
    let seg = |lo: f64, hi: f64| (hi.min(c + w) - lo.max(c)).max(0.0);
    if a + len <= 1.0 {
        seg(a, a + len)
    } else {
        seg(a, 1.0) + seg(0.0, a + len - 1.0)
    }
}

/// A point satisfying `Σ_j v_ij = 1`, `Σ_i p_i v_ij = p_j`, `v_ii = 0`, `v ≥ 0`.
///
/// Units are laid out as consecutive arcs of length `p_i` on a circle of
/// circumference one. Rotating the circle by `θ ∈ [max p, 1 − max p]` maps
/// each arc onto other units' arcs; `v_ij` is the share of arc `i` landing on
/// arc `j`. The result is averaged over several rotations to keep it away
/// from the boundary. Rows with `p_i = 0` are spread uniformly.
pub(crate) fn circle_start(p: &[f64]) -> DMatrix<f64> {
    let n = p.len();
    let mut v = DMatrix::zeros(n, n);
    let mut starts = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &pi in p {
        starts.push(acc);
        acc += pi;
    }
    let total = acc;
    let q: Vec<f64> = p.iter().map(|x| x / total).collect();
    let cs: Vec<f64> = starts.iter().map(|x| x / total).collect();
    let pmax = q.iter().copied().fold(0.0, f64::max);
    let (lo, hi) = (pmax, (1.0 - pmax).max(pmax));
    let shifts = 16;
    for m in 0..shifts {
        let theta = lo + (hi - lo) * (m as f64 + 0.5) / shifts as f64;
        for i in 0..n {
            if q[i] == 0.0 {
                continue;
            }
            for j in 0..n {
                if j != i && q[j] > 0.0 {
                    v[(i, j)] += arc_overlap(cs[i] + theta, q[i], cs[j], q[j]) / q[i] / shifts as f64;
                }
            }
        }
    }
    for i in 0..n {
        if q[i] == 0.0 {
            for j in 0..n {
                if j != i {
                    v[(i, j)] = 1.0 / (n as f64 - 1.0);
                }
            }
        }
    }
    v
}

fn fit_period(panel: &Panel, spec: &WeightSetSpec, t: usize, opts: &QpOptions) -> Result<(WeightSlice, f64, f64)> {
    let n = panel.n_units();
    let mut w = DMatrix::identity(n, n);
    let mut intercept = DVector::zeros(n);
    let mut obj = 0.0;
    let mut kkt: f64 = 0.0;
    for (units, prog) in period_programs(panel, spec, t) {
        let sol = prog.solve(opts)?;
        for (r, &i) in units.iter().enumerate() {
            for ((j, _), &v) in prog.rows[r].regs.iter().zip(&sol.v[r]) {
                w[(i, *j)] = -v;
            }
            intercept[i] = sol.intercepts[r];
        }
        obj += sol.objective;
        kkt = kkt.max(sol.kkt_residual);
    }
    Ok((WeightSlice { intercept, w }, obj, kkt))
}

/// KKT residual of `tensor` for the program of `spec`, maximized over the
/// covered periods, in the solver's normalized units. Membership violations
/// count as primal infeasibility.
pub fn kkt_residual(panel: &Panel, tensor: &WeightTensor, spec: &WeightSetSpec) -> Result<f64> {
    check_dims(panel, tensor)?;
    spec.validate(panel.n_units())?;
    let n = panel.n_units();
    let mut worst: f64 = 0.0;
    for t in tensor.covered_periods() {
        let sl = tensor.slice(t).unwrap();
        for i in 0..n {
            worst = worst.max((sl.w[(i, i)] - 1.0).abs());
        }
        if spec.family.fixed_weights() {
            let off = -1.0 / (n as f64 - 1.0);
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    worst = worst.max((sl.w[(i, j)] - off).abs());
                }
                if spec.family == Family::Dim {
                    worst = worst.max(sl.intercept[i].abs());
                }
            }
            if spec.family == Family::Dim {
                continue;
            }
        }
        let programs = match tensor.objective_kind {
            Objective::Standard => period_programs(panel, spec, t),
            Objective::Uncorrelated => vec![((0..n).collect(), crate::estimate::uncorrelated_program(panel, t))],
        };
        for (units, prog) in programs {
            let mut v = Vec::with_capacity(units.len());
            let mut c = Vec::with_capacity(units.len());
            for (r, &i) in units.iter().enumerate() {
                let row = &prog.rows[r];
                let listed: Vec<usize> = row.regs.iter().map(|(j, _)| *j).collect();
                for j in (0..n).filter(|&j| j != i && !listed.contains(&j)) {
                    worst = worst.max(sl.w[(i, j)].abs());
                }
                v.push(listed.iter().map(|&j| -sl.w[(i, j)]).collect::<Vec<f64>>());
                c.push(sl.intercept[i]);
            }
            if spec.family == Family::Did {
                // Weights are pinned; only intercept optimality remains.
                let fixed = Program { eq: Vec::new(), ..prog.clone() };
                let opt: Vec<f64> = (0..units.len()).map(|r| fixed.intercept(r, &v[r])).collect();
                for r in 0..units.len() {
                    let scale = prog.rows[r].target.iter().map(|x| x.abs()).fold(1.0, f64::max);
                    worst = worst.max((opt[r] - c[r]).abs() / scale);
                }
                continue;
            }
            worst = worst.max(prog.kkt_residual(&v, &c, TOL_FEAS));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;
