//! Randomization laboratory.
//!
//! Runs an estimator over every assignment of a design (or over seeded
//! draws when the support is large) against known potential outcomes, and
//! reports bias, RMSE and the average estimated standard error. Also builds
//! the panels used to probe the estimators: an adversarial panel for
//! synthetic control bias, the placebo counterexamples and a stationary
//! Gaussian generator.
//!
//! ```
//! use gsc::randlab::{adversarial_bias_panel, run_unit_randomization, RunOptions};
//! use gsc::weights::{Family, WeightSetSpec};
//!
//! let pp = adversarial_bias_panel(5).unwrap();
//! let fams = [WeightSetSpec::new(Family::Sc), WeightSetSpec::new(Family::Musc)];
//! let rep = run_unit_randomization(&pp, &fams, 4, &RunOptions::default()).unwrap();
//! assert!((rep.row("sc").unwrap().bias - 0.6).abs() < 1e-6);
//! assert!(rep.row("musc").unwrap().bias.abs() < 1e-8);
//! ```

mod panels;
mod report;
mod runners;

pub use panels::{
    adversarial_bias_panel, gaussian_panel, placebo_example_panels, placebo_examples_with, sample_cross_covariance,
    stationary_synthetic_panel, CrossCovariance, PlaceboExamples, StationaryParams,
};
pub use report::{EstimatorRow, ExperimentReport, Replication};
pub use runners::{
    run_propensity_monte_carlo, run_subset_randomization, run_time_randomization, run_unit_randomization,
    run_unit_time_randomization, PropensityRun, RunOptions,
};

/// Supports up to this many assignments are enumerated rather than sampled.
pub const ENUMERATION_LIMIT: usize = 10_000;

#[cfg(test)]
mod tests;
