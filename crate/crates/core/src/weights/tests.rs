use super::*;
use crate::panel::Assignment;
use crate::randlab::gaussian_panel;
use proptest::prelude::*;

fn fit(p: &Panel, f: Family, t: usize) -> WeightTensor {
    solve_weights(p, &WeightSetSpec::new(f), PeriodScope::Single(t)).unwrap()
}

fn obj(p: &Panel, tensor: &WeightTensor, t: usize) -> f64 {
    objective(p, tensor, PeriodScope::Single(t)).unwrap()
}

/// Direct triple loop over units, periods and weights.
fn objective_oracle(p: &Panel, sl: &WeightSlice, t: usize) -> f64 {
    let (n, tt) = (p.n_units(), p.n_periods());
    let mut total = 0.0;
    for i in 0..n {
        for s in 0..tt {
            if s == t {
                continue;
            }
            let mut e = sl.intercept[i];
            for j in 0..n {
                e += sl.w[(i, j)] * p.y()[(j, s)];
            }
            total += e * e;
        }
    }
    total
}

#[test]
fn family_parsing() {
    assert_eq!("MUSC".parse::<Family>().unwrap(), Family::Musc);
    assert_eq!("musc-p".parse::<Family>().unwrap(), Family::MuscP);
    let err = "lasso".parse::<Family>().unwrap_err().to_string();
    assert!(err.contains("dim, did, sc, msc, usc, musc, musc_p"), "{err}");
}

#[test]
fn spec_validation() {
    assert!(matches!(WeightSetSpec::musc_p(vec![0.6, 0.2, 0.2]).validate(3), Err(Error::Infeasible(_))));
    assert!(WeightSetSpec::musc_p(vec![0.5, 0.3, 0.2]).validate(3).is_ok());
    assert!(WeightSetSpec::musc_p(vec![0.5, 0.5]).validate(2).is_err());
    assert!(WeightSetSpec::new(Family::MuscP).validate(4).is_err());
    assert!(matches!(WeightSetSpec::new(Family::Usc).validate(2), Err(Error::UnsupportedSize(_))));
    assert!(WeightSetSpec::new(Family::Sc).validate(2).is_ok());
}

#[test]
fn objective_matches_loop_oracle() {
    let p = gaussian_panel(5, 7, 1);
    for f in [Family::Dim, Family::Did, Family::Sc, Family::Musc] {
        let tensor = fit(&p, f, 3);
        let want = objective_oracle(&p, tensor.slice(3).unwrap(), 3);
        assert!((obj(&p, &tensor, 3) - want).abs() < 1e-10 * (1.0 + want));
        assert!((tensor.objective_value - want).abs() < 1e-9 * (1.0 + want), "{f}");
    }
}

#[test]
fn did_intercept_beats_grid() {
    let p = gaussian_panel(4, 6, 2);
    let t = 5;
    let did = fit(&p, Family::Did, t);
    let base = obj(&p, &did, t);
    let sl = did.slice(t).unwrap().clone();
    for i in 0..4 {
        for k in -20..=20 {
            let mut s = sl.clone();
            s.intercept[i] += k as f64 * 0.01;
            assert!(objective_oracle(&p, &s, t) >= base - 1e-12);
        }
    }
}

/// Best SC row for N = 3 by scanning the one free weight.
fn sc_grid_row(p: &Panel, i: usize, t: usize) -> f64 {
    let others: Vec<usize> = (0..3).filter(|&j| j != i).collect();
    let mut best = f64::INFINITY;
    for k in 0..=10_000 {
        let a = k as f64 / 10_000.0;
        let ss: f64 = (0..p.n_periods())
            .filter(|&s| s != t)
            .map(|s| {
                let y = p.y();
                (y[(i, s)] - a * y[(others[0], s)] - (1.0 - a) * y[(others[1], s)]).powi(2)
            })
            .sum();
        best = best.min(ss);
    }
    best
}

#[test]
fn sc_three_units_matches_grid() {
    for seed in 0..5 {
        let p = gaussian_panel(3, 8, seed);
        let sc = fit(&p, Family::Sc, 7);
        let grid: f64 = (0..3).map(|i| sc_grid_row(&p, i, 7)).sum();
        let got = obj(&p, &sc, 7);
        assert!(got <= grid + 1e-8 && grid - got < 1e-4, "{got} vs {grid}");
        assert!(sc.kkt_residual <= crate::TOL_KKT);
    }
}

#[test]
fn perturbed_weights_fail_kkt() {
    let p = gaussian_panel(5, 9, 4);
    for f in [Family::Sc, Family::Msc, Family::Usc, Family::Musc] {
        let spec = WeightSetSpec::new(f);
        let tensor = fit(&p, f, 8);
        assert!(kkt_residual(&p, &tensor, &spec).unwrap() <= crate::TOL_KKT, "{f}");
        let mut sl = tensor.slice(8).unwrap().clone();
        // Move mass between two controls of row 0, keeping row sums and signs.
        let a = (1..5).min_by(|&x, &y| sl.w[(0, x)].total_cmp(&sl.w[(0, y)])).unwrap();
        let b = if a == 1 { 2 } else { 1 };
        let d = -0.5 * sl.w[(0, a)];
        sl.w[(0, a)] += d;
        sl.w[(0, b)] -= d;
        let bad = WeightTensor::from_slices(spec.clone(), 9, vec![(8, sl)]).unwrap();
        assert!(kkt_residual(&p, &bad, &spec).unwrap() > crate::TOL_KKT, "{f}");
    }
}

#[test]
fn membership_of_fitted_tensors() {
    let p = gaussian_panel(6, 5, 7);
    for f in Family::ALL.into_iter().filter(|f| *f != Family::MuscP) {
        fit(&p, f, 2).check_membership().unwrap();
    }
    let mp =
        solve_weights(&p, &WeightSetSpec::musc_p(vec![0.3, 0.1, 0.1, 0.2, 0.2, 0.1]), PeriodScope::Single(2)).unwrap();
    mp.check_membership().unwrap();
}

#[test]
fn uniform_propensity_reproduces_musc() {
    let p = gaussian_panel(5, 8, 9);
    let musc = fit(&p, Family::Musc, 7);
    let mp = solve_weights(&p, &WeightSetSpec::musc_p(vec![0.2; 5]), PeriodScope::Single(7)).unwrap();
    let (a, b) = (musc.slice(7).unwrap(), mp.slice(7).unwrap());
    assert!((&a.w - &b.w).amax() < 1e-7);
    assert!((&a.intercept - &b.intercept).amax() < 1e-6);
}

#[test]
fn zero_propensity_rows_drop_out() {
    let p = gaussian_panel(5, 8, 10);
    let prop = vec![0.0, 0.25, 0.25, 0.25, 0.25];
    let mp = solve_weights(&p, &WeightSetSpec::musc_p(prop.clone()), PeriodScope::Single(7)).unwrap();
    let s = mp.slice(7).unwrap();
    for i in 1..5 {
        assert_eq!(s.w[(i, 0)], 0.0);
    }
    for j in 1..5 {
        let c: f64 = (0..5).map(|i| prop[i] * s.w[(i, j)]).sum();
        assert!(c.abs() < 1e-9);
    }
}

#[test]
fn scale_equivariance() {
    let p = gaussian_panel(5, 7, 12);
    let big = p.with_y(p.y() * 1000.0).unwrap();
    for f in [Family::Sc, Family::Musc, Family::Msc] {
        let (a, b) = (fit(&p, f, 6), fit(&big, f, 6));
        let (sa, sb) = (a.slice(6).unwrap(), b.slice(6).unwrap());
        assert!((&sa.w - &sb.w).amax() < 1e-6, "{f}");
        assert!((&sa.intercept * 1000.0 - &sb.intercept).amax() < 1e-3);
    }
}

#[test]
fn two_units_and_constant_panels() {
    let p = gaussian_panel(2, 4, 3);
    for f in [Family::Dim, Family::Did, Family::Sc, Family::Msc] {
        let s = fit(&p, f, 3).slice(3).unwrap().clone();
        assert_eq!(s.w[(0, 1)], -1.0);
    }
    assert!(solve_weights(&p, &WeightSetSpec::new(Family::Musc), PeriodScope::Single(3)).is_err());
    let c = Panel::from_unlabeled(DMatrix::from_element(4, 5, 3.0)).unwrap();
    for f in [Family::Sc, Family::Usc, Family::Musc] {
        let s = fit(&c, f, 4).slice(4).unwrap().clone();
        for i in 0..4 {
            for j in (0..4).filter(|&j| j != i) {
                assert!((s.w[(i, j)] + 1.0 / 3.0).abs() < 1e-6, "{f}: {}", s.w[(i, j)]);
            }
        }
    }
}

#[test]
fn treated_cell_never_moves_the_weights() {
    for seed in 0..3 {
        let p = gaussian_panel(5, 6, seed);
        let mut y = p.y().clone();
        y[(2, 4)] += 17.0;
        let q = p.with_y(y).unwrap();
        for f in [Family::Sc, Family::Musc, Family::Did] {
            assert_eq!(fit(&p, f, 4).slice(4), fit(&q, f, 4).slice(4));
        }
    }
}

#[test]
fn all_period_fit_matches_single_fits() {
    let p = gaussian_panel(4, 5, 8);
    let all = solve_weights(&p, &WeightSetSpec::new(Family::Musc), PeriodScope::All).unwrap();
    assert_eq!(all.covered_periods(), vec![0, 1, 2, 3, 4]);
    for t in 0..5 {
        assert_eq!(all.slice(t), fit(&p, Family::Musc, t).slice(t));
    }
    assert!(matches!(fit(&p, Family::Sc, 1).slice_checked(2), Err(Error::Dimension(_))));
}

#[test]
fn exports() {
    let p = gaussian_panel(3, 4, 5);
    let tensor = fit(&p, Family::Sc, 2);
    let j = tensor.to_json();
    assert_eq!(j["family"], "sc");
    assert!(j["w"][0][1][0].is_null());
    assert!(j["w"][0][1][2].is_number());
    let s = tensor.slice_json(&p, 2).unwrap();
    assert_eq!(s["units"][1], "u2");
    let mut out = Vec::new();
    tensor.write_slice_csv(&p, 2, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with("treated,intercept,u1,u2,u3\n"));
    assert_eq!(text.lines().count(), 4);
    let _ = Assignment::single(0, 2);
}

fn random_panel(seed: u64, n: usize, t: usize) -> Panel {
    gaussian_panel(n, t, seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn nesting_of_objectives(seed in 0u64..1_000_000, n in 3usize..7, t in 4usize..10) {
        let p = random_panel(seed, n, t);
        let last = t - 1;
        let o = |f| obj(&p, &fit(&p, f, last), last);
        let (msc, musc, usc, dim, sc) = (o(Family::Msc), o(Family::Musc), o(Family::Usc), o(Family::Dim), o(Family::Sc));
        let tol = 1e-8 * (1.0 + dim);
        prop_assert!(msc <= musc + tol && musc <= usc + tol && usc <= dim + tol);
        prop_assert!(msc <= sc + tol && sc <= usc + tol);
    }

    #[test]
    fn fitted_weights_satisfy_kkt(seed in 0u64..1_000_000, n in 3usize..7) {
        let p = random_panel(seed, n, 6);
        for f in [Family::Sc, Family::Msc, Family::Usc, Family::Musc, Family::Did] {
            let tensor = fit(&p, f, 5);
            prop_assert!(kkt_residual(&p, &tensor, &WeightSetSpec::new(f)).unwrap() <= crate::TOL_KKT);
            prop_assert!(tensor.check_membership().is_ok());
        }
    }
}
