use super::*;
use crate::estimate::exact_sc_bias;
use crate::panel::{Assignment, Panel, PotentialPanel};
use crate::variance::placebo_variance_estimate;
use crate::weights::{solve_weights, Family, PeriodScope, WeightSetSpec};
use nalgebra::DMatrix;

fn specs(f: &[Family]) -> Vec<WeightSetSpec> {
    f.iter().map(|&f| WeightSetSpec::new(f)).collect()
}

fn zero_effect(n: usize, t: usize, seed: u64) -> PotentialPanel {
    PotentialPanel::zero_effect(gaussian_panel(n, t, seed))
}

#[test]
fn unbiased_families_have_zero_bias() {
    let pp = zero_effect(6, 9, 17);
    let t = 8;
    let fams = specs(&[Family::Dim, Family::Did, Family::Sc, Family::Usc, Family::Musc]);
    let rep = run_unit_randomization(&pp, &fams, t, &RunOptions::default()).unwrap();
    for f in ["dim", "did", "usc", "musc"] {
        assert!(rep.row(f).unwrap().bias.abs() < 1e-8, "{f}");
    }
    let sc = solve_weights(pp.y0_panel(), &fams[2], PeriodScope::Single(t)).unwrap();
    let want = exact_sc_bias(pp.y0(), &sc, t).unwrap();
    assert!((rep.row("sc").unwrap().bias - want).abs() < 1e-12);
    assert!(matches!(rep.replication, Replication::Enumerated { cells: 6 }));
}

#[test]
fn average_variance_estimate_matches_enumeration() {
    let pp = zero_effect(8, 12, 3);
    let fams = specs(&Family::ALL[..6]);
    let rep = run_unit_randomization(&pp, &fams, 11, &RunOptions::default()).unwrap();
    for r in &rep.rows {
        assert!(r.error.is_none(), "{:?}", r.error);
        let (avg, exact) = (r.avg_variance_estimate.unwrap(), r.exact_variance_mean.unwrap());
        assert!((avg - exact).abs() < 1e-9 * (1.0 + exact), "{}: {avg} vs {exact}", r.estimator);
        assert!((r.rmse * r.rmse - exact).abs() < 1e-9 * (1.0 + exact));
    }
}

#[test]
fn failures_are_reported_per_row() {
    let pp = zero_effect(3, 4, 1);
    let rep = run_unit_randomization(&pp, &specs(&[Family::Dim, Family::Usc]), 3, &RunOptions::default()).unwrap();
    assert!(rep.row("dim").unwrap().error.is_none());
    assert!(rep.row("dim").unwrap().avg_standard_error.is_none());
}

#[test]
fn adversarial_panel_bias() {
    for n in [4, 5, 6] {
        let pp = adversarial_bias_panel(n).unwrap();
        let rep = run_unit_randomization(
            &pp,
            &specs(&[Family::Sc, Family::Musc, Family::Usc]),
            n - 1,
            &RunOptions::default(),
        )
        .unwrap();
        let want = (n as f64 - 2.0) / n as f64;
        assert!((rep.row("sc").unwrap().bias - want).abs() < 1e-6, "n={n}");
        assert!(rep.row("musc").unwrap().bias.abs() < 1e-8);
        assert!(rep.row("usc").unwrap().bias.abs() < 1e-8);
    }
    let pp = adversarial_bias_panel(5).unwrap();
    let sc = solve_weights(pp.y0_panel(), &WeightSetSpec::new(Family::Sc), PeriodScope::Single(4)).unwrap();
    let s = sc.slice(4).unwrap();
    for j in 1..5 {
        assert!((s.w[(0, j)] + 0.25).abs() < 1e-6);
        assert!((s.w[(j, 0)] + 1.0).abs() < 1e-6);
    }
    assert!(adversarial_bias_panel(3).is_err());
}

#[test]
fn placebo_examples_are_biased_both_ways() {
    let ex = placebo_example_panels();
    let musc = WeightSetSpec::new(Family::Musc);
    let mean_placebo = |pp: &PotentialPanel| -> f64 {
        (0..4).map(|i| placebo_variance_estimate(pp.y0_panel(), &musc, &Assignment::single(i, 2)).unwrap()).sum::<f64>()
            / 4.0
    };
    let down = run_unit_randomization(
        &ex.downward,
        &[musc.clone(), WeightSetSpec::new(Family::Sc)],
        2,
        &RunOptions::default(),
    )
    .unwrap();
    let up = run_unit_randomization(&ex.upward, std::slice::from_ref(&musc), 2, &RunOptions::default()).unwrap();
    let exact_down = down.row("musc").unwrap().exact_variance_mean.unwrap();
    assert!((exact_down - 1.0).abs() < 1e-8);
    assert!((down.row("sc").unwrap().exact_variance_mean.unwrap() - 1.0).abs() < 1e-8);
    assert!(mean_placebo(&ex.downward) < exact_down - 1e-6);
    let exact_up = up.row("musc").unwrap().exact_variance_mean.unwrap();
    assert!(exact_up.abs() < 1e-8);
    assert!(mean_placebo(&ex.upward) > exact_up + 1e-6);
    assert!(down.row("musc").unwrap().bias.abs() < 1e-8 && up.row("musc").unwrap().bias.abs() < 1e-8);
    assert!(placebo_examples_with(0.0, 1.0, 2.0, 3.0).is_err());
}

#[test]
fn time_randomization_constant_panel() {
    let pp = PotentialPanel::zero_effect(Panel::from_unlabeled(DMatrix::from_element(4, 5, 2.5)).unwrap());
    let rep = run_time_randomization(
        &pp,
        &specs(&[Family::Dim, Family::Did, Family::Sc, Family::Musc]),
        0,
        &RunOptions::default(),
    )
    .unwrap();
    for r in &rep.rows {
        assert!(r.rmse < 1e-9, "{}: {}", r.estimator, r.rmse);
    }
}

#[test]
fn time_randomization_three_periods_by_hand() {
    let y = DMatrix::from_row_slice(4, 3, &[1.0, 4.0, 2.0, 0.0, 1.0, 5.0, 3.0, 3.0, 1.0, 2.0, 0.0, 4.0]);
    let pp = PotentialPanel::zero_effect(Panel::from_unlabeled(y.clone()).unwrap());
    let rep = run_time_randomization(&pp, &specs(&[Family::Dim, Family::Did]), 1, &RunOptions::default()).unwrap();
    let dim_err = |t: usize| y[(1, t)] - (y[(0, t)] + y[(2, t)] + y[(3, t)]) / 3.0;
    let mse_dim = (0..3).map(|t| dim_err(t).powi(2)).sum::<f64>() / 3.0;
    let did_err = |t: usize| dim_err(t) - (0..3).filter(|&s| s != t).map(dim_err).sum::<f64>() / 2.0;
    let mse_did = (0..3).map(|t| did_err(t).powi(2)).sum::<f64>() / 3.0;
    assert!((rep.row("dim").unwrap().rmse.powi(2) - mse_dim).abs() < 1e-12);
    assert!((rep.row("did").unwrap().rmse.powi(2) - mse_did).abs() < 1e-12);
    assert!(run_time_randomization(&pp, &specs(&[Family::Dim]), 7, &RunOptions::default()).is_err());
}

#[test]
fn star_propensities_remove_sc_bias() {
    let y = DMatrix::from_row_slice(3, 2, &[1.0, 0.3, 2.0, -1.7, 3.0, 4.4]);
    let pp = PotentialPanel::zero_effect(Panel::from_unlabeled(y).unwrap());
    let sc = WeightSetSpec::new(Family::Sc);
    let run = run_propensity_monte_carlo(&pp, std::slice::from_ref(&sc), &[0.25, 0.5, 0.25], 1, 10_000, 5).unwrap();
    assert!(run.exact.row("sc").unwrap().bias.abs() < 1e-8);
    let uniform = run_propensity_monte_carlo(&pp, &[sc], &[1.0 / 3.0; 3], 1, 10, 5).unwrap();
    assert!(uniform.exact.row("sc").unwrap().bias.abs() > 1e-3);
}

#[test]
fn uniform_propensity_matches_unit_randomization() {
    let pp = zero_effect(5, 7, 8);
    let p = vec![0.2; 5];
    let run = run_propensity_monte_carlo(&pp, &[WeightSetSpec::musc_p(p.clone())], &p, 6, 50, 1).unwrap();
    let unit = run_unit_randomization(&pp, &specs(&[Family::Musc]), 6, &RunOptions::default()).unwrap();
    let (a, b) = (run.exact.row("musc_p").unwrap(), unit.row("musc").unwrap());
    assert!((a.bias - b.bias).abs() < 1e-8);
    assert!((a.rmse - b.rmse).abs() < 1e-6);
}

#[test]
fn monte_carlo_agrees_with_enumeration() {
    let pp = zero_effect(6, 8, 21);
    let p = vec![0.1, 0.3, 0.2, 0.15, 0.15, 0.1];
    let fams = specs(&[Family::Sc, Family::Dim]);
    let run = run_propensity_monte_carlo(&pp, &fams, &p, 7, 10_000, 77).unwrap();
    for f in ["sc", "dim"] {
        let (e, s) = (run.exact.row(f).unwrap(), run.sampled.row(f).unwrap());
        let se = s.bias_standard_error.unwrap();
        assert!((e.bias - s.bias).abs() <= 3.0 * se, "{f}: {} vs {} (se {se})", e.bias, s.bias);
    }
    let again = run_propensity_monte_carlo(&pp, &fams, &p, 7, 10_000, 77).unwrap();
    assert_eq!(again.sampled.to_json_string(), run.sampled.to_json_string());
    assert!(matches!(run.sampled.replication, Replication::Sampled { seed: 77, draws: 10_000 }));
}

#[test]
fn unit_time_design_enumerates_small_supports() {
    let pp = zero_effect(4, 5, 2);
    let rep = run_unit_time_randomization(&pp, &specs(&[Family::Dim, Family::Musc]), &RunOptions::default()).unwrap();
    assert!(matches!(rep.replication, Replication::Enumerated { cells: 20 }));
    assert!(rep.row("dim").unwrap().bias.abs() < 1e-12);
    assert!(rep.row("musc").unwrap().bias.abs() < 1e-8);
}

#[test]
fn subset_design_is_unbiased() {
    let pp = zero_effect(6, 5, 12);
    let rep = run_subset_randomization(&pp, 2, 4, &RunOptions::default()).unwrap();
    let r = rep.row("musc").unwrap();
    assert!(r.bias.abs() < 1e-8);
    let exact = r.exact_variance_mean.unwrap();
    assert!((r.avg_variance_estimate.unwrap() - exact).abs() < 1e-9 * (1.0 + exact));
}

#[test]
fn stationary_generator() {
    let white = StationaryParams {
        ar: 0.0,
        covariance: CrossCovariance::Equicorrelated { variance: 1.0, correlation: 0.0 },
        unit_means: None,
    };
    let pp = stationary_synthetic_panel(4, 2000, &white, 9).unwrap();
    let s = sample_cross_covariance(pp.y0());
    assert!((s - DMatrix::identity(4, 4)).amax() < 0.1);
    let a = stationary_synthetic_panel(5, 30, &StationaryParams::default(), 4).unwrap();
    let b = stationary_synthetic_panel(5, 30, &StationaryParams::default(), 4).unwrap();
    assert_eq!(a, b);
    let bad = StationaryParams {
        covariance: CrossCovariance::Equicorrelated { variance: 1.0, correlation: -0.5 },
        ..Default::default()
    };
    assert!(stationary_synthetic_panel(4, 10, &bad, 1).is_err());
    let explosive = StationaryParams { ar: 1.0, ..Default::default() };
    assert!(stationary_synthetic_panel(4, 10, &explosive, 1).is_err());
    let shifted = StationaryParams { unit_means: Some(vec![10.0, 0.0, 0.0]), ..Default::default() };
    let c = stationary_synthetic_panel(3, 500, &shifted, 2).unwrap();
    assert!(c.y0().row(0).mean() > 9.0);
}

#[test]
fn correlated_units_favour_musc() {
    // Pooled over seeds: a single period's cross-section is too noisy to rank estimators.
    let params =
        StationaryParams { covariance: CrossCovariance::Toeplitz { variance: 1.0, decay: 0.9 }, ..Default::default() };
    let fams = specs(&[Family::Dim, Family::Musc]);
    let (mut dim, mut musc) = (0.0, 0.0);
    for seed in 0..8 {
        let pp = stationary_synthetic_panel(8, 40, &params, seed).unwrap();
        let rep =
            run_unit_randomization(&pp, &fams, 39, &RunOptions { variance: false, ..Default::default() }).unwrap();
        dim += rep.row("dim").unwrap().rmse.powi(2);
        musc += rep.row("musc").unwrap().rmse.powi(2);
    }
    assert!(musc < dim, "musc {musc} dim {dim}");
}

#[test]
fn msc_time_bias_shrinks_with_t() {
    let fams = specs(&[Family::Msc]);
    let mean_abs_bias = |t: usize| -> f64 {
        (0..4)
            .map(|seed| {
                let pp = stationary_synthetic_panel(5, t, &StationaryParams::default(), 100 + seed).unwrap();
                let opts = RunOptions { variance: false, ..Default::default() };
                run_time_randomization(&pp, &fams, 0, &opts).unwrap().rows[0].bias.abs()
            })
            .sum::<f64>()
            / 4.0
    };
    let (small, large) = (mean_abs_bias(25), mean_abs_bias(200));
    assert!(large < small, "{large} >= {small}");
}
