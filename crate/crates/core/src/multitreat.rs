//! Several treated units.
//!
//! With `N_T` units treated together the weight tensor has one row per
//! candidate subset. Row `k` puts weight `1/N_T` on each member of subset `k`
//! and nonpositive weights on the rest; rows sum to zero and the column of
//! every unit sums to zero over the `K = C(N, N_T)` subsets. For `N_T = 1`
//! this is the MUSC family.
//!
//! ```
//! use gsc::multitreat::enumerate_subsets;
//!
//! let idx = enumerate_subsets(4, 2).unwrap();
//! assert_eq!(idx.len(), 6);
//! assert_eq!(idx.subsets()[1], vec![0, 2]);
//! ```

use crate::error::{Error, Result};
use crate::estimate::{Estimand, Estimate};
use crate::linalg::{binom, binom_u128, lex_subsets};
use crate::numfmt::json_f64;
use crate::panel::{Assignment, Panel};
use crate::qp::{EqRow, QpOptions};
use crate::weights::{Family, PeriodScope, Program, Row, WeightSetSpec};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde_json::{json, Value};

/// Largest number of subsets accepted.
pub const K_MAX: usize = 5000;

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetIndex {
    n: usize,
    n_t: usize,
    subsets: Vec<Vec<usize>>,
}

impl SubsetIndex {
    pub fn n_units(&self) -> usize {
        self.n
    }

    pub fn n_treated(&self) -> usize {
        self.n_t
    }

    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }

    pub fn subsets(&self) -> &[Vec<usize>] {
        &self.subsets
    }

    /// Row of a sorted subset.
    pub fn position(&self, units: &[usize]) -> Option<usize> {
        self.subsets.binary_search_by(|s| s.as_slice().cmp(units)).ok()
    }

    pub fn contains(&self, k: usize, j: usize) -> bool {
        self.subsets[k].binary_search(&j).is_ok()
    }

    fn disjoint(&self, k: usize, l: usize) -> bool {
        self.subsets[l].iter().all(|&j| !self.contains(k, j))
    }
}

/// All subsets of size `n_t` in lexicographic order.
pub fn enumerate_subsets(n: usize, n_t: usize) -> Result<SubsetIndex> {
    if n_t == 0 || n_t >= n {
        return Err(Error::Invalid(format!("the treated count must lie in 1..={}, got {n_t}", n.saturating_sub(1))));
    }
    let k = binom_u128(n, n_t);
    match k {
        Some(k) if k <= K_MAX as u128 => {}
        _ => {
            let shown = k.map_or_else(|| "more than 2^128".to_owned(), |k| k.to_string());
            return Err(Error::UnsupportedSize(format!(
                "C({n}, {n_t}) = {shown} subsets exceeds the limit of {K_MAX}"
            )));
        }
    }
    Ok(SubsetIndex { n, n_t, subsets: lex_subsets(n, n_t) })
}

/// Weights for one period: `intercept[k]` and `w[(k, j)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSlice {
    pub intercept: DVector<f64>,
    pub w: DMatrix<f64>,
}

impl MultiSlice {
    pub fn apply(&self, k: usize, y: impl Fn(usize) -> f64) -> f64 {
        self.intercept[k] + (0..self.w.ncols()).map(|j| self.w[(k, j)] * y(j)).sum::<f64>()
    }
}

#[derive(Debug, Clone)]
pub struct MultiWeightTensor {
    pub index: SubsetIndex,
    pub n_periods: usize,
    slices: Vec<Option<MultiSlice>>,
    pub objective_value: f64,
    pub kkt_residual: f64,
}

impl MultiWeightTensor {
    pub fn from_slices(index: SubsetIndex, n_periods: usize, slices: Vec<(usize, MultiSlice)>) -> Result<Self> {
        let mut out = MultiWeightTensor {
            slices: vec![None; n_periods],
            index,
            n_periods,
            objective_value: 0.0,
            kkt_residual: 0.0,
        };
        for (t, s) in slices {
            if t >= n_periods {
                return Err(Error::Dimension(format!("period {t} out of range 0..{n_periods}")));
            }
            if s.w.nrows() != out.index.len() || s.w.ncols() != out.index.n || s.intercept.len() != out.index.len() {
                return Err(Error::Dimension(format!(
                    "slice for period {t} must be {}x{}",
                    out.index.len(),
                    out.index.n
                )));
            }
            out.slices[t] = Some(s);
        }
        Ok(out)
    }

    pub fn slice(&self, t: usize) -> Option<&MultiSlice> {
        self.slices.get(t).and_then(|s| s.as_ref())
    }

    pub fn slice_checked(&self, t: usize) -> Result<&MultiSlice> {
        self.slice(t).ok_or_else(|| Error::Invalid(format!("period {t} is not covered by the weight tensor")))
    }

    pub fn covered_periods(&self) -> Vec<usize> {
        (0..self.n_periods).filter(|&t| self.slices[t].is_some()).collect()
    }

    /// Largest violation of the subset weight constraints over covered periods.
    pub fn membership_violation(&self) -> f64 {
        let (n, kk, nt) = (self.index.n, self.index.len(), self.index.n_t as f64);
        let mut worst: f64 = 0.0;
        for s in self.slices.iter().flatten() {
            for k in 0..kk {
                for j in 0..n {
                    let m = s.w[(k, j)];
                    worst = worst.max(if self.index.contains(k, j) { (m - 1.0 / nt).abs() } else { m.max(0.0) });
                }
                worst = worst.max(s.w.row(k).sum().abs());
            }
            for j in 0..n {
                worst = worst.max(s.w.column(j).sum().abs());
            }
        }
        worst
    }

    /// `{n_treated, subsets, periods_covered, intercept[k][t], w[k][j][t], ...}`
    /// with subsets as label lists and `null` for uncovered periods.
    pub fn to_json(&self, panel: &Panel) -> Value {
        let (n, kk) = (self.index.n, self.index.len());
        let cell = |t: usize, f: &dyn Fn(&MultiSlice) -> f64| self.slice(t).map_or(Value::Null, |s| json_f64(f(s)));
        let subsets: Vec<Vec<&String>> =
            self.index.subsets.iter().map(|s| s.iter().map(|&j| &panel.units()[j]).collect()).collect();
        let intercept: Vec<Value> = (0..kk)
            .map(|k| Value::Array((0..self.n_periods).map(|t| cell(t, &|s| s.intercept[k])).collect()))
            .collect();
        let w: Vec<Value> = (0..kk)
            .map(|k| {
                Value::Array(
                    (0..n)
                        .map(|j| Value::Array((0..self.n_periods).map(|t| cell(t, &|s| s.w[(k, j)])).collect()))
                        .collect(),
                )
            })
            .collect();
        json!({
            "family": "musc",
            "n_treated": self.index.n_t,
            "subsets": subsets,
            "periods_covered": self.covered_periods(),
            "intercept": intercept,
            "w": w,
            "objective_value": json_f64(self.objective_value),
            "kkt_residual": json_f64(self.kkt_residual),
        })
    }
}

/// Fit subset weights for every period.
pub fn solve_multi_weights(panel: &Panel, n_t: usize) -> Result<MultiWeightTensor> {
    solve_multi_weights_scoped(panel, n_t, PeriodScope::All)
}

pub fn solve_multi_weights_scoped(panel: &Panel, n_t: usize, scope: PeriodScope) -> Result<MultiWeightTensor> {
    let n = panel.n_units();
    let index = enumerate_subsets(n, n_t)?;
    if n - n_t < 2 {
        return Err(Error::UnsupportedSize(format!("subset weights need at least two controls, got {}", n - n_t)));
    }
    let tt = panel.n_periods();
    if let PeriodScope::Single(t) = scope {
        if t >= tt {
            return Err(Error::Dimension(format!("period {t} out of range 0..{tt}")));
        }
    }
    let periods = scope.periods(tt);
    let opts = QpOptions::default();
    let fitted: Vec<Result<(MultiSlice, f64, f64)>> = periods
        .par_iter()
        .map(|&t| {
            let prog = multi_program(panel, &index, t);
            let sol = prog.solve(&opts)?;
            Ok((to_slice(&index, &prog, &sol.v, &sol.intercepts), sol.objective, sol.kkt_residual))
        })
        .collect();
    let mut out = MultiWeightTensor::from_slices(index, tt, Vec::new())?;
    for (&t, r) in periods.iter().zip(fitted) {
        let (s, obj, kkt) = r?;
        out.objective_value += obj;
        out.kkt_residual = out.kkt_residual.max(kkt);
        out.slices[t] = Some(s);
    }
    Ok(out)
}

fn to_slice(index: &SubsetIndex, prog: &Program, v: &[Vec<f64>], c: &[f64]) -> MultiSlice {
    let (n, kk) = (index.n, index.len());
    let mut w = DMatrix::zeros(kk, n);
    for k in 0..kk {
        for &j in &index.subsets[k] {
            w[(k, j)] = 1.0 / index.n_t as f64;
        }
        for ((j, _), &x) in prog.rows[k].regs.iter().zip(&v[k]) {
            w[(k, *j)] = -x;
        }
    }
    MultiSlice { intercept: DVector::from_column_slice(c), w }
}

/// Row `k` targets the subset mean with the non-members as regressors. Each
/// unit's column carries total control weight `C(N−1, N_T−1)/N_T`. The
/// start point gives every control `1/N_C`.
pub(crate) fn multi_program(panel: &Panel, index: &SubsetIndex, t: usize) -> Program {
    let (n, nt) = (index.n, index.n_t);
    let y = panel.y();
    let ys: Vec<Vec<f64>> =
        (0..n).map(|i| (0..panel.n_periods()).filter(|&s| s != t).map(|s| y[(i, s)]).collect()).collect();
    let len = ys.first().map_or(0, Vec::len);
    let mut rows = Vec::with_capacity(index.len());
    let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut eq = Vec::with_capacity(index.len() + n);
    let mut var = 0;
    for (k, sub) in index.subsets.iter().enumerate() {
        let target: Vec<f64> = (0..len).map(|s| sub.iter().map(|&j| ys[j][s]).sum::<f64>() / nt as f64).collect();
        let regs: Vec<(usize, Vec<f64>)> =
            (0..n).filter(|&j| !index.contains(k, j)).map(|j| (j, ys[j].clone())).collect();
        let mut coefs = Vec::with_capacity(regs.len());
        for (j, _) in &regs {
            cols[*j].push((var, 1.0));
            coefs.push((var, 1.0));
            var += 1;
        }
        eq.push(EqRow { coefs, rhs: 1.0 });
        rows.push(Row { target, regs, weight: 1.0 });
    }
    let col_rhs = binom(n - 1, nt - 1) / nt as f64;
    for c in cols {
        eq.push(EqRow { coefs: c, rhs: col_rhs });
    }
    Program { rows, free_intercept: true, eq, start: vec![1.0 / (n - nt) as f64; var] }
}

fn check_tensor(panel: &Panel, mt: &MultiWeightTensor) -> Result<()> {
    if mt.index.n != panel.n_units() || mt.n_periods != panel.n_periods() {
        return Err(Error::Dimension(format!(
            "tensor is for {} units and {} periods, panel has {} and {}",
            mt.index.n,
            mt.n_periods,
            panel.n_units(),
            panel.n_periods()
        )));
    }
    Ok(())
}

fn subset_row(mt: &MultiWeightTensor, a: &Assignment) -> Result<usize> {
    mt.index.position(a.treated_units()).ok_or_else(|| {
        Error::Invalid(format!(
            "treated units {:?} do not form a subset of size {} in the index",
            a.treated_units(),
            mt.index.n_t
        ))
    })
}

/// `M_k0t + Σ_j M_kjt Y_jt` for the realized subset `k`.
pub fn multi_gsc_estimate(panel: &Panel, mt: &MultiWeightTensor, a: &Assignment) -> Result<Estimate> {
    check_tensor(panel, mt)?;
    a.check(panel.n_units(), panel.n_periods())?;
    let k = subset_row(mt, a)?;
    let t = a.treated_period();
    let s = mt.slice_checked(t)?;
    let y = panel.y();
    Ok(Estimate {
        value: s.apply(k, |j| y[(j, t)]),
        estimator_family: WeightSetSpec::new(Family::Musc),
        assignment: a.clone(),
        estimand_target: Estimand::Treated,
    })
}

/// `(1/K) Σ_k (M_k0t + Σ_j M_kjt Y_jt(0))²`.
pub fn multi_exact_variance(y0: &DMatrix<f64>, mt: &MultiWeightTensor, t: usize) -> Result<f64> {
    let s = mt.slice_checked(t)?;
    if y0.nrows() != mt.index.n || t >= y0.ncols() {
        return Err(Error::Dimension("outcome matrix does not match the tensor".into()));
    }
    let kk = mt.index.len();
    Ok((0..kk).map(|k| s.apply(k, |j| y0[(j, t)]).powi(2)).sum::<f64>() / kk as f64)
}

/// How the intercept term enters the variance estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InterceptTerm {
    /// `(1/K) Σ_l M_l0²` over every subset.
    #[default]
    Pooled,
    /// `Σ_l M_l0² / C(N_C, N_T)` over the subsets disjoint from the treated one.
    LeaveFoldOut,
}

/// Unbiased estimate of [`multi_exact_variance`] from the control outcomes.
///
/// Sums over the subsets `l` disjoint from the treated subset `k`, with
/// `Ȳ_l` the mean of `l` and `b_lj = M_lj (Y_j − Ȳ_l)` for controls `j`
/// outside `l`:
///
/// ```text
///   1/C(N_C−2, N_T)              Σ_l (Σ_j b_lj)²
/// − N_T/((N_C−1) C(N_C−2, N_T))  Σ_l Σ_j b_lj²
/// + 2/C(N_C−1, N_T)              Σ_l M_l0 Σ_j b_lj
/// + (1/K)                        Σ_{all l} M_l0²
/// ```
pub fn multi_unbiased_variance_estimate(panel: &Panel, mt: &MultiWeightTensor, a: &Assignment) -> Result<f64> {
    multi_unbiased_variance_estimate_with(panel, mt, a, InterceptTerm::Pooled)
}

pub fn multi_unbiased_variance_estimate_with(
    panel: &Panel,
    mt: &MultiWeightTensor,
    a: &Assignment,
    term: InterceptTerm,
) -> Result<f64> {
    check_tensor(panel, mt)?;
    let (n, nt) = (mt.index.n, mt.index.n_t);
    let nc = n - nt;
    if nc < nt + 2 {
        return Err(Error::UnsupportedSize(format!(
            "the estimator divides by C(N_C - 2, N_T) and needs N_C >= N_T + 2, got N_C = {nc}, N_T = {nt}"
        )));
    }
    a.check(n, panel.n_periods())?;
    let k = subset_row(mt, a)?;
    let t = a.treated_period();
    let s = mt.slice_checked(t)?;
    let y = panel.y().column(t);
    let d2 = binom(nc - 2, nt);
    let d1 = binom(nc - 1, nt);
    let d0 = binom(nc, nt);
    let (mut sq, mut diag, mut cross, mut own) = (0.0, 0.0, 0.0, 0.0);
    for l in (0..mt.index.len()).filter(|&l| mt.index.disjoint(k, l)) {
        let ybar = mt.index.subsets[l].iter().map(|&j| y[j]).sum::<f64>() / nt as f64;
        let (mut lin, mut sqs) = (0.0, 0.0);
        for j in (0..n).filter(|&j| !mt.index.contains(k, j) && !mt.index.contains(l, j)) {
            let b = s.w[(l, j)] * (y[j] - ybar);
            lin += b;
            sqs += b * b;
        }
        sq += lin * lin;
        diag += sqs;
        cross += s.intercept[l] * lin;
        own += s.intercept[l].powi(2);
    }
    let intercept = match term {
        InterceptTerm::Pooled => s.intercept.iter().map(|c| c * c).sum::<f64>() / mt.index.len() as f64,
        InterceptTerm::LeaveFoldOut => own / d0,
    };
    Ok(sq / d2 - nt as f64 * diag / ((nc - 1) as f64 * d2) + 2.0 * cross / d1 + intercept)
}
