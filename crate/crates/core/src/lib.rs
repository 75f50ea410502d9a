//! Design-based generalized synthetic control (GSC).
//!
//! A GSC estimator predicts the counterfactual for a treated unit/period as an
//! intercept plus a linear combination of the other units' outcomes in the
//! same period, with weights fitted on the non-treated periods. This crate
//! fits the weight tensors for the usual families (difference in means,
//! difference in differences, synthetic control and its modified and
//! unbiased variants), evaluates point estimates, computes the exact
//! randomization variance together with an unbiased estimator of it, and
//! checks every bias and variance claim by enumerating the assignment
//! distribution on finite panels.
//!
//! Module map:
//!
//! * [`panel`]: panels, potential outcomes, assignments and designs.
//! * [`weights`]: weight-set families and the constrained least-squares fit.
//! * [`estimate`]: point estimates, estimands, bias formulas.
//! * [`variance`]: exact variance, unbiased and placebo variance estimators.
//! * [`network`]: flow-network view of a weight slice, centrality, propensities.
//! * [`multitreat`]: several treated units per assignment.
//! * [`randlab`]: enumeration and Monte Carlo experiments.
//!
//! ```
//! use gsc::panel::{Assignment, Panel};
//! use gsc::weights::{solve_weights, Family, PeriodScope, WeightSetSpec};
//! use gsc::estimate::gsc_estimate;
//!
//! // Three units, two periods; the middle unit is treated in the last period.
//! let panel = Panel::new(
//!     vec!["AZ".into(), "CA".into(), "NY".into()],
//!     vec!["1".into(), "2".into()],
//!     vec![vec![1.0, 1.0], vec![2.0, 2.5], vec![3.0, 3.0]],
//! )
//! .unwrap();
//! let tensor = solve_weights(&panel, &WeightSetSpec::new(Family::Sc), PeriodScope::Single(1)).unwrap();
//! let est = gsc_estimate(&panel, &tensor, &Assignment::single(1, 1)).unwrap();
//! assert!((est.value - 0.5).abs() < 1e-9);
//! ```

pub mod error;
pub mod estimate;
pub mod linalg;
pub mod multitreat;
pub mod network;
pub mod numfmt;
pub mod panel;
pub mod qp;
pub mod randlab;
pub mod variance;
pub mod weights;

pub use error::{Error, Result};

/// Feasibility tolerance used by every constraint-membership check.
pub const TOL_FEAS: f64 = 1e-9;
/// Bound on the scaled KKT residual a fitted weight tensor must satisfy.
pub const TOL_KKT: f64 = 1e-8;
/// Iteration cap for the active-set solver.
pub const MAX_ITER: usize = 100_000;
