//! Least-squares weight programs and their translation into block QPs.
//!
//! Every weight family reduces to the same shape: a set of rows `r`, each
//! with a target series `y_r(s)` and regressors `x_rk(s)` over the fit
//! periods, nonnegative coefficients `v_rk` and an optional free intercept
//! `c_r`. The residual of row `r` is `c_r + y_r(s) − Σ_k v_rk x_rk(s)` and
//! the objective is the `π_r`-weighted sum of squared residuals. Linear
//! equalities on `v` encode row and column sums.
//!
//! Free intercepts are profiled out by centering over the fit periods. The
//! QP objective is divided by the mean diagonal of its Hessian and a ridge
//! `RIDGE · ‖v‖²` is added, so the returned weights are invariant to
//! rescaling the outcomes and ties resolve to the minimum-norm solution.

use crate::error::Result;
use crate::linalg::nnls;
use crate::qp::{self, BlockQp, EqRow, QpBlock, QpOptions};
use nalgebra::{DMatrix, DVector};

/// Relative ridge weight added to every normalized program.
pub const RIDGE: f64 = 1e-10;

#[derive(Debug, Clone)]
pub(crate) struct Row {
    pub target: Vec<f64>,
    /// `(column id, regressor series)`; the column id is what the caller maps back.
    pub regs: Vec<(usize, Vec<f64>)>,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Program {
    pub rows: Vec<Row>,
    pub free_intercept: bool,
    /// Equalities over the flattened `v` (row-major, regressor order).
    pub eq: Vec<EqRow>,
    pub start: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct ProgramSolution {
    /// `v` per row, in regressor order.
    pub v: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
}

struct Normalized {
    qp: BlockQp,
    scale: f64,
}

fn center(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - m).collect()
}

impl Program {
    pub fn n_vars(&self) -> usize {
        self.rows.iter().map(|r| r.regs.len()).sum()
    }

    fn normalized(&self) -> Normalized {
        let mut blocks = Vec::with_capacity(self.rows.len());
        let mut diag_sum = 0.0;
        for row in &self.rows {
            let (y, xs): (Vec<f64>, Vec<Vec<f64>>) = if self.free_intercept {
                (center(&row.target), row.regs.iter().map(|(_, x)| center(x)).collect())
            } else {
                (row.target.clone(), row.regs.iter().map(|(_, x)| x.clone()).collect())
            };
            let k = xs.len();
            let mut h = DMatrix::zeros(k, k);
            let mut f = DVector::zeros(k);
            for a in 0..k {
                for b in 0..=a {
                    let d: f64 = xs[a].iter().zip(&xs[b]).map(|(p, q)| p * q).sum();
                    h[(a, b)] = 2.0 * row.weight * d;
                    h[(b, a)] = h[(a, b)];
                }
                f[a] = 2.0 * row.weight * xs[a].iter().zip(&y).map(|(p, q)| p * q).sum::<f64>();
                diag_sum += h[(a, a)];
            }
            blocks.push(QpBlock { h, f });
        }
        let n = self.n_vars();
        let mean_diag = if n > 0 { diag_sum / n as f64 } else { 0.0 };
        let scale = if mean_diag > 0.0 && mean_diag.is_finite() { mean_diag } else { 1.0 };
        for b in &mut blocks {
            b.h /= scale;
            b.f /= scale;
            for a in 0..b.f.len() {
                b.h[(a, a)] += 2.0 * RIDGE;
            }
        }
        Normalized { qp: BlockQp { blocks, eq: self.eq.clone() }, scale }
    }

    fn split(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.rows.len());
        let mut k = 0;
        for r in &self.rows {
            out.push(x[k..k + r.regs.len()].to_vec());
            k += r.regs.len();
        }
        out
    }

    /// Intercept minimizing row `r` for fixed `v_r`.
    pub fn intercept(&self, r: usize, v: &[f64]) -> f64 {
        if !self.free_intercept {
            return 0.0;
        }
        let row = &self.rows[r];
        let s = row.target.len();
        if s == 0 {
            return 0.0;
        }
        let total: f64 =
            (0..s).map(|t| row.target[t] - row.regs.iter().zip(v).map(|((_, x), w)| w * x[t]).sum::<f64>()).sum();
        -total / s as f64
    }

    /// Weighted sum of squared residuals.
    pub fn objective(&self, v: &[Vec<f64>], intercepts: &[f64]) -> f64 {
        self.rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                let ss: f64 = (0..row.target.len())
                    .map(|t| {
                        let e = intercepts[r] + row.target[t]
                            - row.regs.iter().zip(&v[r]).map(|((_, x), w)| w * x[t]).sum::<f64>();
                        e * e
                    })
                    .sum();
                row.weight * ss
            })
            .sum()
    }

    pub fn solve(&self, opts: &QpOptions) -> Result<ProgramSolution> {
        let norm = self.normalized();
        let x0 = DVector::from_vec(self.start.clone());
        let sol = qp::solve(&norm.qp, &x0, opts)?;
        let v = self.split(sol.x.as_slice());
        let intercepts: Vec<f64> = (0..self.rows.len()).map(|r| self.intercept(r, &v[r])).collect();
        let objective = self.objective(&v, &intercepts);
        Ok(ProgramSolution { v, intercepts, objective, kkt_residual: sol.kkt_residual })
    }

    /// KKT residual of an arbitrary candidate `(v, c)` in the normalized units
    /// used by the solver. Bound multipliers are recovered by nonnegative least
    /// squares on the variables sitting at their bound.
    pub fn kkt_residual(&self, v: &[Vec<f64>], intercepts: &[f64], tol_feas: f64) -> f64 {
        let norm = self.normalized();
        let x = DVector::from_iterator(self.n_vars(), v.iter().flatten().copied());
        let n = x.len();
        let mut worst = norm.qp.eq_residual(&x);
        worst = worst.max(x.iter().fold(0.0_f64, |m, &a| m.max(-a)));

        for (r, row) in self.rows.iter().enumerate() {
            let c = intercepts[r];
            if !self.free_intercept {
                worst = worst.max(c.abs());
                continue;
            }
            let s = row.target.len() as f64;
            let mean_res: f64 = (0..row.target.len())
                .map(|t| c + row.target[t] - row.regs.iter().zip(&v[r]).map(|((_, xs), w)| w * xs[t]).sum::<f64>())
                .sum::<f64>()
                / s.max(1.0);
            // Derivative of the normalized objective in c, relative to the gradient scale of v.
            let g = 2.0 * row.weight * s * mean_res / norm.scale.sqrt();
            worst = worst.max(g.abs());
        }
        if n == 0 {
            return worst;
        }

        let g = norm.qp.gradient(&x);
        let kept = qp::independent_rows(&norm.qp.eq, n);
        let mut basis: Vec<DVector<f64>> = Vec::new();
        for &ri in &kept {
            let mut a = DVector::zeros(n);
            for &(k, coef) in &norm.qp.eq[ri].coefs {
                a[k] += coef;
            }
            for _ in 0..2 {
                for q in &basis {
                    let d = q.dot(&a);
                    a.axpy(-d, q, 1.0);
                }
            }
            let nrm = a.norm();
            basis.push(a / nrm);
        }
        let project = |w: &DVector<f64>| -> DVector<f64> {
            let mut out = w.clone();
            for q in &basis {
                let d = q.dot(&out);
                out.axpy(-d, q, 1.0);
            }
            out
        };
        let at_bound: Vec<usize> = (0..n).filter(|&k| x[k] <= tol_feas).collect();
        let pg = project(&g);
        let mut stat = pg.clone();
        if !at_bound.is_empty() {
            let mut pe = DMatrix::zeros(n, at_bound.len());
            for (c, &k) in at_bound.iter().enumerate() {
                let mut e = DVector::zeros(n);
                e[k] = 1.0;
                pe.set_column(c, &project(&e));
            }
            let mu = nnls(&pe, &pg);
            stat = &pg - &pe * &mu;
            for (c, &k) in at_bound.iter().enumerate() {
                worst = worst.max((mu[c] * x[k]).abs());
            }
        }
        worst.max(stat.amax())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_row(target: Vec<f64>, regs: Vec<Vec<f64>>, free: bool) -> Program {
        let k = regs.len();
        Program {
            rows: vec![Row { target, regs: regs.into_iter().enumerate().collect(), weight: 1.0 }],
            free_intercept: free,
            eq: vec![EqRow { coefs: (0..k).map(|j| (j, 1.0)).collect(), rhs: 1.0 }],
            start: vec![1.0 / k as f64; k],
        }
    }

    #[test]
    fn exact_fit_row() {
        let p = one_row(vec![2.0, 3.0, 4.0], vec![vec![2.0, 3.0, 4.0], vec![0.0, 1.0, 5.0]], false);
        let sol = p.solve(&QpOptions::default()).unwrap();
        assert!((sol.v[0][0] - 1.0).abs() < 1e-8);
        assert!(sol.objective < 1e-12);
        assert!(p.kkt_residual(&sol.v, &sol.intercepts, 1e-9) < 1e-8);
    }

    #[test]
    fn intercept_absorbs_level_shift() {
        let p = one_row(vec![12.0, 13.0, 14.0], vec![vec![2.0, 3.0, 4.0], vec![0.0, 1.0, 5.0]], true);
        let sol = p.solve(&QpOptions::default()).unwrap();
        assert!((sol.v[0][0] - 1.0).abs() < 1e-8);
        assert!((sol.intercepts[0] + 10.0).abs() < 1e-7);
    }

    #[test]
    fn perturbed_optimum_fails_kkt() {
        let p =
            one_row(vec![1.0, 0.0, 2.0], vec![vec![0.0, 1.0, 1.0], vec![2.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]], false);
        let sol = p.solve(&QpOptions::default()).unwrap();
        assert!(p.kkt_residual(&sol.v, &sol.intercepts, 1e-9) < 1e-8);
        let mut v = sol.v.clone();
        let (hi, lo) = if v[0][0] > 0.2 { (0, 1) } else { (1, 0) };
        v[0][hi] -= 0.1;
        v[0][lo] += 0.1;
        assert!(p.kkt_residual(&v, &sol.intercepts, 1e-9) > 1e-8);
    }
}
