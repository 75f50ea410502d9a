//! Primal active-set solver for convex QPs with a block-diagonal Hessian.
//!
//! Solves
//!
//! ```text
//! minimize  ½ xᵀ H x − fᵀ x
//! subject to A x = b,  x ≥ 0
//! ```
//!
//! where `H = diag(H_1, …, H_B)` is positive definite. Each block is a small
//! dense matrix; the equality rows may couple blocks. Equality-constrained
//! subproblems are solved through the Schur complement `A H⁻¹ Aᵀ` built from
//! per-block Cholesky factors, followed by iterative refinement on the full
//! KKT residual. Redundant equality rows are removed up front so the working
//! set stays linearly independent.
//!
//! The solver needs a feasible starting point; the weight-set builders in
//! [`crate::weights`] provide one for every family.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// One diagonal block of the Hessian with its linear term.
#[derive(Debug, Clone)]
pub struct QpBlock {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
}

/// A sparse equality row `Σ coef·x[var] = rhs` over global variable indices.
#[derive(Debug, Clone, PartialEq)]
pub struct EqRow {
    pub coefs: Vec<(usize, f64)>,
    pub rhs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BlockQp {
    pub blocks: Vec<QpBlock>,
    pub eq: Vec<EqRow>,
}

#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    pub max_iter: usize,
    /// Bound on the final KKT residual.
    pub tol_kkt: f64,
    /// A working-set multiplier below `-tol_drop` releases its bound.
    pub tol_drop: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions { max_iter: crate::MAX_ITER, tol_kkt: crate::TOL_KKT, tol_drop: 1e-11 }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of the retained equality rows, indexed like `BlockQp::eq`
    /// (zero for rows found redundant).
    pub lambda: Vec<f64>,
    /// Bound multipliers, zero for variables off their bound.
    pub mu: Vec<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl BlockQp {
    pub fn n_vars(&self) -> usize {
        self.blocks.iter().map(|b| b.f.len()).sum()
    }

    fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.blocks.len() + 1);
        let mut acc = 0;
        off.push(0);
        for b in &self.blocks {
            acc += b.f.len();
            off.push(acc);
        }
        off
    }

    /// `H x − f`.
    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let off = self.offsets();
        let mut g = DVector::zeros(x.len());
        for (b, blk) in self.blocks.iter().enumerate() {
            let xs = x.rows(off[b], blk.f.len());
            let gb = &blk.h * xs - &blk.f;
            g.rows_mut(off[b], blk.f.len()).copy_from(&gb);
        }
        g
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let off = self.offsets();
        self.blocks
            .iter()
            .enumerate()
            .map(|(b, blk)| {
                let xs = x.rows(off[b], blk.f.len()).into_owned();
                0.5 * xs.dot(&(&blk.h * &xs)) - blk.f.dot(&xs)
            })
            .sum()
    }

    pub fn eq_residual(&self, x: &DVector<f64>) -> f64 {
        self.eq.iter().map(|r| (r.coefs.iter().map(|&(k, c)| c * x[k]).sum::<f64>() - r.rhs).abs()).fold(0.0, f64::max)
    }
}

/// Indices of a maximal linearly independent subset of the equality rows,
/// chosen greedily in order by modified Gram–Schmidt.
pub fn independent_rows(rows: &[EqRow], n_vars: usize) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for (r, row) in rows.iter().enumerate() {
        let mut v = DVector::zeros(n_vars);
        for &(k, c) in &row.coefs {
            v[k] += c;
        }
        let norm0 = v.norm();
        if norm0 == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for q in &basis {
                let d = q.dot(&v);
                v.axpy(-d, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-10 * norm0 {
            basis.push(v / norm);
            keep.push(r);
        }
    }
    keep
}

struct BlockFactor {
    /// Free local indices.
    free: Vec<usize>,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    /// Constraint rows (retained indices) touching the free part of this block.
    rows: Vec<usize>,
    /// Constraint coefficients restricted to the free variables, `rows × free`.
    a: DMatrix<f64>,
    /// `H_FF⁻¹ A_Fᵀ`.
    z: DMatrix<f64>,
}

struct Workspace<'a> {
    qp: &'a BlockQp,
    off: Vec<usize>,
    kept: Vec<usize>,
    /// For each block, the (retained row, local var, coef) entries touching it.
    touches: Vec<Vec<(usize, usize, f64)>>,
    factors: Vec<Option<BlockFactor>>,
}

impl<'a> Workspace<'a> {
    fn new(qp: &'a BlockQp, kept: Vec<usize>) -> Self {
        let off = qp.offsets();
        let mut touches = vec![Vec::new(); qp.blocks.len()];
        for (ri, &r) in kept.iter().enumerate() {
            for &(k, c) in &qp.eq[r].coefs {
                let b = off.partition_point(|&o| o <= k) - 1;
                touches[b].push((ri, k - off[b], c));
            }
        }
        let factors = (0..qp.blocks.len()).map(|_| None).collect();
        Workspace { qp, off, kept, touches, factors }
    }

    fn block_of(&self, k: usize) -> usize {
        self.off.partition_point(|&o| o <= k) - 1
    }

    fn refactor(&mut self, b: usize, fixed: &[bool]) -> Result<()> {
        let blk = &self.qp.blocks[b];
        let n = blk.f.len();
        let free: Vec<usize> = (0..n).filter(|&l| !fixed[self.off[b] + l]).collect();
        let mut pos = vec![usize::MAX; n];
        for (p, &l) in free.iter().enumerate() {
            pos[l] = p;
        }
        let mut rows: Vec<usize> =
            self.touches[b].iter().filter(|&&(_, l, _)| pos[l] != usize::MAX).map(|&(r, _, _)| r).collect();
        rows.sort_unstable();
        rows.dedup();
        let mut a = DMatrix::zeros(rows.len(), free.len());
        for &(r, l, c) in &self.touches[b] {
            if pos[l] != usize::MAX {
                let ri = rows.binary_search(&r).unwrap();
                a[(ri, pos[l])] += c;
            }
        }
        if free.is_empty() {
            self.factors[b] = Some(BlockFactor { free, chol: None, rows, a, z: DMatrix::zeros(0, 0) });
            return Ok(());
        }
        let hff = DMatrix::from_fn(free.len(), free.len(), |p, q| blk.h[(free[p], free[q])]);
        let chol = hff.cholesky().ok_or_else(|| Error::Infeasible("block Hessian is not positive definite".into()))?;
        let z = chol.solve(&a.transpose());
        self.factors[b] = Some(BlockFactor { free, chol: Some(chol), rows, a, z });
        Ok(())
    }

    /// Solve `H_FF x − A_Fᵀ λ = r1`, `A_F x = r2` with fixed variables held at zero.
    /// `r1` is indexed by global variable (entries of fixed variables ignored).
    fn kkt_solve(&self, r1: &DVector<f64>, r2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let m = self.kept.len();
        let mut s = DMatrix::<f64>::zeros(m, m);
        let mut rhs = r2.clone();
        let mut hinv_r1: Vec<DVector<f64>> = Vec::with_capacity(self.factors.len());
        for (b, fac) in self.factors.iter().enumerate() {
            let fac = fac.as_ref().unwrap();
            let Some(chol) = &fac.chol else {
                hinv_r1.push(DVector::zeros(0));
                continue;
            };
            let rb = DVector::from_iterator(fac.free.len(), fac.free.iter().map(|&l| r1[self.off[b] + l]));
            let y = chol.solve(&rb);
            let ay = &fac.a * &y;
            let az = &fac.a * &fac.z;
            for (p, &rp) in fac.rows.iter().enumerate() {
                rhs[rp] -= ay[p];
                for (q, &rq) in fac.rows.iter().enumerate() {
                    s[(rp, rq)] += az[(p, q)];
                }
            }
            hinv_r1.push(y);
        }
        let lambda = if m == 0 {
            DVector::zeros(0)
        } else {
            match s.clone().cholesky() {
                Some(c) => c.solve(&rhs),
                None => s.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(m)),
            }
        };
        let mut x = DVector::zeros(r1.len());
        for (b, fac) in self.factors.iter().enumerate() {
            let fac = fac.as_ref().unwrap();
            if fac.free.is_empty() {
                continue;
            }
            let lam_b = DVector::from_iterator(fac.rows.len(), fac.rows.iter().map(|&r| lambda[r]));
            let xb = &hinv_r1[b] + &fac.z * lam_b;
            for (p, &l) in fac.free.iter().enumerate() {
                x[self.off[b] + l] = xb[p];
            }
        }
        (x, lambda)
    }

    /// Residuals of the equality-constrained subproblem at `(x, λ)`.
    fn eqp_residual(&self, x: &DVector<f64>, lambda: &DVector<f64>, fixed: &[bool]) -> (DVector<f64>, DVector<f64>) {
        let mut r1 = self.qp.gradient(x);
        r1.neg_mut();
        for (ri, &r) in self.kept.iter().enumerate() {
            for &(k, c) in &self.qp.eq[r].coefs {
                r1[k] += c * lambda[ri];
            }
        }
        for (k, &fx) in fixed.iter().enumerate() {
            if fx {
                r1[k] = 0.0;
            }
        }
        let r2 = DVector::from_iterator(
            self.kept.len(),
            self.kept.iter().map(|&r| {
                let row = &self.qp.eq[r];
                row.rhs - row.coefs.iter().map(|&(k, c)| c * x[k]).sum::<f64>()
            }),
        );
        (r1, r2)
    }

    /// Minimizer of the objective on `{A x = b, x_k = 0 for fixed k}` with its multipliers.
    fn solve_eqp(&self, fixed: &[bool]) -> (DVector<f64>, DVector<f64>) {
        let n = fixed.len();
        let mut f = DVector::zeros(n);
        for (b, blk) in self.qp.blocks.iter().enumerate() {
            f.rows_mut(self.off[b], blk.f.len()).copy_from(&blk.f);
        }
        let rhs = DVector::from_iterator(self.kept.len(), self.kept.iter().map(|&r| self.qp.eq[r].rhs));
        let (mut x, mut lambda) = self.kkt_solve(&f, &rhs);
        let mut best = residual_norm(&self.eqp_residual(&x, &lambda, fixed));
        for _ in 0..3 {
            if best <= 1e-15 {
                break;
            }
            let (r1, r2) = self.eqp_residual(&x, &lambda, fixed);
            let (dx, dl) = self.kkt_solve(&r1, &r2);
            let x2 = &x + dx;
            let l2 = &lambda + dl;
            let res = residual_norm(&self.eqp_residual(&x2, &l2, fixed));
            if res < best {
                best = res;
                x = x2;
                lambda = l2;
            } else {
                break;
            }
        }
        (x, lambda)
    }

    fn bound_multipliers(&self, x: &DVector<f64>, lambda: &DVector<f64>, fixed: &[bool]) -> DVector<f64> {
        let mut mu = self.qp.gradient(x);
        for (ri, &r) in self.kept.iter().enumerate() {
            for &(k, c) in &self.qp.eq[r].coefs {
                mu[k] -= c * lambda[ri];
            }
        }
        for (k, &fx) in fixed.iter().enumerate() {
            if !fx {
                mu[k] = 0.0;
            }
        }
        mu
    }

    /// Max of stationarity, dual feasibility, primal feasibility and complementarity violations.
    fn kkt(&self, x: &DVector<f64>, lambda: &DVector<f64>, fixed: &[bool]) -> f64 {
        let mut stat = self.qp.gradient(x);
        for (ri, &r) in self.kept.iter().enumerate() {
            for &(k, c) in &self.qp.eq[r].coefs {
                stat[k] -= c * lambda[ri];
            }
        }
        let mut worst = self.qp.eq_residual(x);
        for k in 0..x.len() {
            worst = worst.max(-x[k]);
            if fixed[k] {
                worst = worst.max(-stat[k]).max((stat[k] * x[k]).abs());
            } else {
                worst = worst.max(stat[k].abs());
            }
        }
        worst
    }
}

/// Directional components above `-TINY_STEP` cannot block a step.
const TINY_STEP: f64 = 1e-13;

fn residual_norm((r1, r2): &(DVector<f64>, DVector<f64>)) -> f64 {
    r1.amax().max(if r2.is_empty() { 0.0 } else { r2.amax() })
}

/// Solve a block QP from a feasible starting point `x0`.
///
/// ```
/// use gsc::qp::{solve, BlockQp, EqRow, QpBlock, QpOptions};
/// use nalgebra::{DMatrix, DVector};
///
/// // Nearest point to (1, -1) on the segment x0 + x1 = 1, x ≥ 0.
/// let qp = BlockQp {
///     blocks: vec![QpBlock { h: DMatrix::identity(2, 2), f: DVector::from_vec(vec![1.0, -1.0]) }],
///     eq: vec![EqRow { coefs: vec![(0, 1.0), (1, 1.0)], rhs: 1.0 }],
/// };
/// let sol = solve(&qp, &DVector::from_vec(vec![0.5, 0.5]), &QpOptions::default()).unwrap();
/// assert!((sol.x[0] - 1.0).abs() < 1e-12 && sol.x[1] == 0.0);
/// ```
pub fn solve(qp: &BlockQp, x0: &DVector<f64>, opts: &QpOptions) -> Result<QpSolution> {
    let n = qp.n_vars();
    if x0.len() != n {
        return Err(Error::Dimension(format!("start point has {} entries, problem has {n} variables", x0.len())));
    }
    let start_viol = qp.eq_residual(x0).max(x0.iter().fold(0.0_f64, |m, &v| m.max(-v)));
    if start_viol > 1e-7 {
        return Err(Error::Infeasible(format!("starting point violates constraints by {start_viol:e}")));
    }
    let kept = independent_rows(&qp.eq, n);
    let mut ws = Workspace::new(qp, kept);
    let mut x = x0.map(|v| v.max(0.0));
    let mut fixed = vec![false; n];
    for b in 0..qp.blocks.len() {
        ws.refactor(b, &fixed)?;
    }

    let mut zero_steps = 0usize;
    let mut best = f64::INFINITY;
    for iter in 0..opts.max_iter {
        let (xs, lambda) = ws.solve_eqp(&fixed);
        let d = &xs - &x;
        let bland = zero_steps > 50;

        let mut alpha = 1.0;
        let mut blocking = None;
        for k in 0..n {
            if !fixed[k] && d[k] < -TINY_STEP {
                let a = x[k] / -d[k];
                if a < alpha {
                    alpha = a;
                    blocking = Some(k);
                }
            }
        }

        if let Some(k) = blocking {
            x.axpy(alpha, &d, 1.0);
            x[k] = 0.0;
            for j in 0..n {
                if !fixed[j] && x[j] < 0.0 {
                    x[j] = 0.0;
                }
            }
            fixed[k] = true;
            ws.refactor(ws.block_of(k), &fixed)?;
            zero_steps = if alpha == 0.0 { zero_steps + 1 } else { 0 };
            continue;
        }

        x = xs;
        for j in 0..n {
            if fixed[j] {
                x[j] = 0.0;
            }
        }
        let mu = ws.bound_multipliers(&x, &lambda, &fixed);
        let mut drop = None;
        let mut most = -opts.tol_drop;
        for k in 0..n {
            if fixed[k] && mu[k] < most {
                drop = Some(k);
                if bland {
                    break;
                }
                most = mu[k];
            }
        }
        match drop {
            Some(k) => {
                fixed[k] = false;
                ws.refactor(ws.block_of(k), &fixed)?;
            }
            None => {
                let kkt = ws.kkt(&x, &lambda, &fixed);
                if kkt > opts.tol_kkt {
                    return Err(Error::NonConvergence { iterations: iter + 1, best_residual: kkt });
                }
                let mut lam_full = vec![0.0; qp.eq.len()];
                for (ri, &r) in ws.kept.iter().enumerate() {
                    lam_full[r] = lambda[ri];
                }
                return Ok(QpSolution {
                    x,
                    lambda: lam_full,
                    mu: mu.iter().copied().collect(),
                    kkt_residual: kkt,
                    iterations: iter + 1,
                });
            }
        }
        best = best.min(ws.kkt(&x, &lambda, &fixed));
    }
    Err(Error::NonConvergence { iterations: opts.max_iter, best_residual: best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn simplex_qp(h: DMatrix<f64>, f: DVector<f64>) -> BlockQp {
        let n = f.len();
        BlockQp {
            blocks: vec![QpBlock { h, f }],
            eq: vec![EqRow { coefs: (0..n).map(|k| (k, 1.0)).collect(), rhs: 1.0 }],
        }
    }

    /// Euclidean projection onto the simplex by the sort-and-threshold rule.
    fn project_simplex(y: &[f64]) -> Vec<f64> {
        let mut u = y.to_vec();
        u.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut css = 0.0;
        let mut theta = 0.0;
        for (k, &uk) in u.iter().enumerate() {
            css += uk;
            let t = (css - 1.0) / (k + 1) as f64;
            if uk - t > 0.0 {
                theta = t;
            }
        }
        y.iter().map(|&v| (v - theta).max(0.0)).collect()
    }

    #[test]
    fn projection_matches_sort_rule() {
        let y = [0.3, 1.2, -0.4, 0.9, 0.1];
        let n = y.len();
        let qp = simplex_qp(DMatrix::identity(n, n), DVector::from_row_slice(&y));
        let sol = solve(&qp, &DVector::from_element(n, 1.0 / n as f64), &QpOptions::default()).unwrap();
        let want = project_simplex(&y);
        for k in 0..n {
            assert!((sol.x[k] - want[k]).abs() < 1e-12, "{:?} vs {want:?}", sol.x);
        }
        assert!(sol.kkt_residual < 1e-12);
    }

    #[test]
    fn redundant_rows_are_skipped() {
        let rows = vec![
            EqRow { coefs: vec![(0, 1.0), (1, 1.0)], rhs: 1.0 },
            EqRow { coefs: vec![(2, 1.0), (3, 1.0)], rhs: 1.0 },
            EqRow { coefs: vec![(0, 1.0), (2, 1.0)], rhs: 1.0 },
            EqRow { coefs: vec![(1, 1.0), (3, 1.0)], rhs: 1.0 },
        ];
        assert_eq!(independent_rows(&rows, 4), vec![0, 1, 2]);
    }

    #[test]
    fn coupled_blocks_transport_problem() {
        // Two blocks of two variables each with row and column sums, i.e. a 2x2 doubly
        // stochastic matrix; the only freedom is the single parameter x00.
        let qp = BlockQp {
            blocks: vec![
                QpBlock { h: DMatrix::identity(2, 2), f: DVector::from_vec(vec![2.0, 0.0]) },
                QpBlock { h: DMatrix::identity(2, 2), f: DVector::from_vec(vec![0.0, 0.0]) },
            ],
            eq: vec![
                EqRow { coefs: vec![(0, 1.0), (1, 1.0)], rhs: 1.0 },
                EqRow { coefs: vec![(2, 1.0), (3, 1.0)], rhs: 1.0 },
                EqRow { coefs: vec![(0, 1.0), (2, 1.0)], rhs: 1.0 },
                EqRow { coefs: vec![(1, 1.0), (3, 1.0)], rhs: 1.0 },
            ],
        };
        // x = (a, 1-a, 1-a, a); objective ½(a² + (1-a)² + (1-a)² + a²) − 2a, minimized at a = 1.
        let sol = solve(&qp, &DVector::from_element(4, 0.5), &QpOptions::default()).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-12 && (sol.x[3] - 1.0).abs() < 1e-12);
        assert!(sol.x[1].abs() < 1e-12 && sol.x[2].abs() < 1e-12);
    }

    #[test]
    fn rejects_infeasible_start() {
        let qp = simplex_qp(DMatrix::identity(2, 2), DVector::zeros(2));
        assert!(matches!(
            solve(&qp, &DVector::from_vec(vec![1.0, 1.0]), &QpOptions::default()),
            Err(Error::Infeasible(_))
        ));
    }

    proptest! {
        #[test]
        fn simplex_projection_oracle(y in proptest::collection::vec(-3.0f64..3.0, 2..12)) {
            let n = y.len();
            let qp = simplex_qp(DMatrix::identity(n, n), DVector::from_row_slice(&y));
            let sol = solve(&qp, &DVector::from_element(n, 1.0 / n as f64), &QpOptions::default()).unwrap();
            let want = project_simplex(&y);
            for k in 0..n {
                prop_assert!((sol.x[k] - want[k]).abs() < 1e-10);
            }
        }

        #[test]
        fn random_least_squares_satisfies_kkt(
            seed in proptest::collection::vec(-1.0f64..1.0, 60),
            n in 2usize..6,
        ) {
            // H = XᵀX + small ridge with random X (10 × n).
            let x = DMatrix::from_fn(10, n, |i, j| seed[(i * n + j) % 60] + 0.1 * (i as f64 - j as f64).sin());
            let y = DVector::from_fn(10, |i, _| seed[(7 * i + 3) % 60]);
            let h = x.transpose() * &x + DMatrix::identity(n, n) * 1e-8;
            let f = x.transpose() * y;
            let qp = simplex_qp(h, f);
            let sol = solve(&qp, &DVector::from_element(n, 1.0 / n as f64), &QpOptions::default()).unwrap();
            prop_assert!(sol.kkt_residual <= 1e-8);
            // No feasible vertex does better.
            let best = qp.value(&sol.x);
            for k in 0..n {
                let mut e = DVector::zeros(n);
                e[k] = 1.0;
                prop_assert!(best <= qp.value(&e) + 1e-9);
            }
        }
    }
}
