use super::report::{summarize, Cell, EstimatorRow, ExperimentReport, Replication};
use super::ENUMERATION_LIMIT;
use crate::error::{Error, Result};
use crate::estimate::{gsc_estimate, true_estimands};
use crate::multitreat::{
    multi_exact_variance, multi_gsc_estimate, multi_unbiased_variance_estimate, solve_multi_weights_scoped,
};
use crate::panel::{check_propensity, Assignment, AssignmentDesign, PotentialPanel};
use crate::variance::{exact_variance, unbiased_variance_estimate};
use crate::weights::{solve_weights, PeriodScope, WeightSetSpec, WeightTensor};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Options shared by the experiment runners.
#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    /// Evaluate the unbiased variance estimator in every cell (needs `N ≥ 4`).
    pub variance: bool,
    /// Draws used when the support exceeds the enumeration limit.
    pub draws: usize,
    pub seed: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { variance: true, draws: 10_000, seed: 0 }
    }
}

fn label(spec: &WeightSetSpec) -> String {
    spec.family.name().to_owned()
}

/// Error, variance estimate and exact variance of one assignment.
fn cell(pp: &PotentialPanel, tensor: &WeightTensor, a: &Assignment, prob: f64, variance: bool) -> Result<Cell> {
    let obs = pp.observed(a);
    let est = gsc_estimate(&obs, tensor, a)?.value;
    let tau = true_estimands(pp, a).tau;
    let variance_estimate =
        if variance && pp.n_units() >= 4 { Some(unbiased_variance_estimate(&obs, tensor, a)?) } else { None };
    let exact = exact_variance(pp.y0(), tensor, a.treated_period())?;
    Ok(Cell { prob, error: est - tau, variance_estimate, exact_variance: Some(exact) })
}

fn row_for(spec: &WeightSetSpec, cells: Result<Vec<Cell>>, sampled: bool) -> EstimatorRow {
    match cells {
        Ok(c) => summarize(&label(spec), &c, sampled),
        Err(e) => EstimatorRow::failed(&label(spec), e.to_string()),
    }
}

/// Weights depend on the outcomes of the non-treated periods only, and the
/// observed panel differs from `Y(0)` only in treated cells, so one fit on
/// `Y(0)` serves every assignment.
fn fit(pp: &PotentialPanel, spec: &WeightSetSpec, scope: PeriodScope) -> Result<WeightTensor> {
    solve_weights(pp.y0_panel(), spec, scope)
}

fn check_period(pp: &PotentialPanel, t: usize) -> Result<()> {
    if t >= pp.n_periods() {
        return Err(Error::Invalid(format!("treated period {t} out of range 0..{}", pp.n_periods())));
    }
    Ok(())
}

/// Every unit in turn is treated at period `t`, each with probability `1/N`.
pub fn run_unit_randomization(
    pp: &PotentialPanel,
    families: &[WeightSetSpec],
    t: usize,
    opts: &RunOptions,
) -> Result<ExperimentReport> {
    check_period(pp, t)?;
    let n = pp.n_units();
    let rows = families
        .par_iter()
        .map(|spec| {
            let cells = fit(pp, spec, PeriodScope::Single(t)).and_then(|tensor| {
                (0..n).map(|i| cell(pp, &tensor, &Assignment::single(i, t), 1.0 / n as f64, opts.variance)).collect()
            });
            row_for(spec, cells, false)
        })
        .collect();
    Ok(ExperimentReport {
        design: AssignmentDesign::UniformUnit,
        treated_period: Some(t),
        treated_unit: None,
        replication: Replication::Enumerated { cells: n },
        rows,
    })
}

/// Unit `i` is treated in each period in turn, each with probability `1/T`;
/// the weights for period `t` are fit on the other periods.
pub fn run_time_randomization(
    pp: &PotentialPanel,
    families: &[WeightSetSpec],
    i: usize,
    opts: &RunOptions,
) -> Result<ExperimentReport> {
    let (n, tt) = (pp.n_units(), pp.n_periods());
    if tt < 3 {
        return Err(Error::UnsupportedSize(format!("time randomization needs T >= 3, got {tt}")));
    }
    if i >= n {
        return Err(Error::Invalid(format!("treated unit {i} out of range 0..{n}")));
    }
    let rows = families
        .iter()
        .map(|spec| {
            let cells = fit(pp, spec, PeriodScope::All).and_then(|tensor| {
                (0..tt)
                    .into_par_iter()
                    .map(|t| cell(pp, &tensor, &Assignment::single(i, t), 1.0 / tt as f64, opts.variance))
                    .collect()
            });
            row_for(spec, cells, false)
        })
        .collect();
    Ok(ExperimentReport {
        design: AssignmentDesign::UniformTime,
        treated_period: None,
        treated_unit: Some(i),
        replication: Replication::Enumerated { cells: tt },
        rows,
    })
}

/// Unit and period drawn independently and uniformly. The `N·T` cells are
/// enumerated up to the enumeration limit and sampled beyond it.
pub fn run_unit_time_randomization(
    pp: &PotentialPanel,
    families: &[WeightSetSpec],
    opts: &RunOptions,
) -> Result<ExperimentReport> {
    let (n, tt) = (pp.n_units(), pp.n_periods());
    if tt < 3 {
        return Err(Error::UnsupportedSize(format!("time randomization needs T >= 3, got {tt}")));
    }
    let support = n * tt;
    let (assignments, replication): (Vec<Assignment>, Replication) = if support <= ENUMERATION_LIMIT {
        let all = (0..tt).flat_map(|t| (0..n).map(move |i| Assignment::single(i, t))).collect();
        (all, Replication::Enumerated { cells: support })
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let draws = opts.draws.max(1);
        let all = (0..draws).map(|_| Assignment::single(rng.random_range(0..n), rng.random_range(0..tt))).collect();
        (all, Replication::Sampled { seed: opts.seed, draws })
    };
    let sampled = matches!(replication, Replication::Sampled { .. });
    let prob = 1.0 / assignments.len() as f64;
    let rows = families
        .iter()
        .map(|spec| {
            let cells = fit(pp, spec, PeriodScope::All)
                .and_then(|tensor| assignments.par_iter().map(|a| cell(pp, &tensor, a, prob, opts.variance)).collect());
            row_for(spec, cells, sampled)
        })
        .collect();
    Ok(ExperimentReport {
        design: AssignmentDesign::UniformUnitAndTime,
        treated_period: None,
        treated_unit: None,
        replication,
        rows,
    })
}

/// Exact and sampled reports for a unit design with propensities `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityRun {
    pub exact: ExperimentReport,
    pub sampled: ExperimentReport,
}

/// Unit `i` treated at period `t` with probability `p_i`: the exact
/// `p`-weighted enumeration next to `draws` seeded samples from `p`.
pub fn run_propensity_monte_carlo(
    pp: &PotentialPanel,
    families: &[WeightSetSpec],
    p: &[f64],
    t: usize,
    draws: usize,
    seed: u64,
) -> Result<PropensityRun> {
    check_period(pp, t)?;
    check_propensity(p, pp.n_units())?;
    if draws == 0 {
        return Err(Error::Invalid("the Monte Carlo run needs at least one draw".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = WeightedIndex::new(p).map_err(|e| Error::Invalid(format!("propensity: {e}")))?;
    let sample: Vec<usize> = (0..draws).map(|_| dist.sample(&mut rng)).collect();
    let support: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
    let fitted: Vec<(EstimatorRow, EstimatorRow)> = families
        .par_iter()
        .map(|spec| match fit(pp, spec, PeriodScope::Single(t)) {
            Ok(tensor) => {
                let exact: Result<Vec<Cell>> =
                    support.iter().map(|&i| cell(pp, &tensor, &Assignment::single(i, t), p[i], false)).collect();
                let drawn: Result<Vec<Cell>> = sample
                    .iter()
                    .map(|&i| cell(pp, &tensor, &Assignment::single(i, t), 1.0 / draws as f64, false))
                    .collect();
                (row_for(spec, exact, false), row_for(spec, drawn, true))
            }
            Err(e) => {
                (EstimatorRow::failed(&label(spec), e.to_string()), EstimatorRow::failed(&label(spec), e.to_string()))
            }
        })
        .collect();
    let (exact_rows, sampled_rows) = fitted.into_iter().unzip();
    let design = AssignmentDesign::Propensity(p.to_vec());
    Ok(PropensityRun {
        exact: ExperimentReport {
            design: design.clone(),
            treated_period: Some(t),
            treated_unit: None,
            replication: Replication::Enumerated { cells: support.len() },
            rows: exact_rows,
        },
        sampled: ExperimentReport {
            design,
            treated_period: Some(t),
            treated_unit: None,
            replication: Replication::Sampled { seed, draws },
            rows: sampled_rows,
        },
    })
}

/// Every subset of `n_t` units in turn is treated at period `t`, using the
/// subset-indexed MUSC weights.
pub fn run_subset_randomization(
    pp: &PotentialPanel,
    n_t: usize,
    t: usize,
    opts: &RunOptions,
) -> Result<ExperimentReport> {
    check_period(pp, t)?;
    let mt = solve_multi_weights_scoped(pp.y0_panel(), n_t, PeriodScope::Single(t))?;
    let k = mt.index.len();
    let nc = pp.n_units() - n_t;
    let with_variance = opts.variance && nc >= n_t + 2;
    let exact = multi_exact_variance(pp.y0(), &mt, t)?;
    let cells: Result<Vec<Cell>> = mt
        .index
        .subsets()
        .par_iter()
        .map(|s| {
            let a = Assignment::subset(s.clone(), t)?;
            let obs = pp.observed(&a);
            let est = multi_gsc_estimate(&obs, &mt, &a)?.value;
            let v = if with_variance { Some(multi_unbiased_variance_estimate(&obs, &mt, &a)?) } else { None };
            Ok(Cell {
                prob: 1.0 / k as f64,
                error: est - true_estimands(pp, &a).tau,
                variance_estimate: v,
                exact_variance: Some(exact),
            })
        })
        .collect();
    let row = match cells {
        Ok(c) => summarize("musc", &c, false),
        Err(e) => EstimatorRow::failed("musc", e.to_string()),
    };
    Ok(ExperimentReport {
        design: AssignmentDesign::UniformSubset(n_t),
        treated_period: Some(t),
        treated_unit: None,
        replication: Replication::Enumerated { cells: k },
        rows: vec![row],
    })
}
