use crate::config::{Design, Emit, Generator, RunConfig};
use gsc::estimate::gsc_estimate;
use gsc::linalg::binom_u128;
use gsc::multitreat::{multi_gsc_estimate, multi_unbiased_variance_estimate, solve_multi_weights_scoped, K_MAX};
use gsc::network::{eigenvector_centrality, is_strongly_connected, slice_network, unbiased_propensities};
use gsc::numfmt::{json_f64, json_vec, to_json_string};
use gsc::panel::{load_panel, Assignment, CsvOptions, Panel, PotentialPanel};
use gsc::qp::QpOptions;
use gsc::randlab::{
    adversarial_bias_panel, gaussian_panel, placebo_example_panels, run_propensity_monte_carlo,
    run_subset_randomization, run_time_randomization, run_unit_randomization, run_unit_time_randomization,
    stationary_synthetic_panel, CrossCovariance, RunOptions, StationaryParams,
};
use gsc::variance::{placebo_variance_estimate, variance_report, VarianceOptions};
use gsc::weights::{solve_weights_with, Family, PeriodScope, WeightSetSpec, WeightTensor};
use serde_json::{json, Value};
use std::fmt::Write as _;

/// A failed run: exit code 2 for bad input, 3 when the solver gives up.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub fn invalid(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

impl From<gsc::Error> for Failure {
    fn from(e: gsc::Error) -> Self {
        Failure { code: if e.is_solver_failure() { 3 } else { 2 }, message: e.to_string() }
    }
}

type Out = Result<String, Failure>;

fn panel(cfg: &RunConfig) -> Result<Panel, Failure> {
    let path = cfg.panel.as_ref().ok_or_else(|| invalid("no panel given (--panel or `panel` in the config)"))?;
    let opts = CsvOptions { delimiter: cfg.delimiter.map_or(b',', |c| c as u8) };
    load_panel(path, &opts).map_err(|e| match e {
        gsc::Error::Io(io) => invalid(format!("{}: {io}", path.display())),
        e => invalid(format!("{}: {e}", path.display())),
    })
}

fn period(cfg: &RunConfig, p: &Panel) -> Result<usize, Failure> {
    let label = cfg.treated_period.as_deref().ok_or_else(|| invalid("no treated period given (--treated-period)"))?;
    if label == "last" {
        return Ok(p.n_periods() - 1);
    }
    p.period_index(label).ok_or_else(|| invalid(format!("period {label:?} is not in the panel")))
}

fn unit(label: &str, p: &Panel) -> Result<usize, Failure> {
    p.unit_index(label).ok_or_else(|| invalid(format!("unit {label:?} is not in the panel")))
}

fn spec_for(name: &str, cfg: &RunConfig, n: usize) -> Result<WeightSetSpec, Failure> {
    let family: Family = name.parse().map_err(|e: gsc::Error| invalid(e.to_string()))?;
    let spec = match family {
        Family::MuscP => {
            let p = cfg.propensity.clone().ok_or_else(|| invalid("family musc_p needs --propensity"))?;
            WeightSetSpec::musc_p(p)
        }
        f => WeightSetSpec::new(f),
    };
    spec.validate(n)?;
    Ok(spec)
}

fn family_spec(cfg: &RunConfig, n: usize, default: &str) -> Result<WeightSetSpec, Failure> {
    spec_for(cfg.family.as_deref().unwrap_or(default), cfg, n)
}

fn qp_options(cfg: &RunConfig) -> QpOptions {
    let mut o = QpOptions::default();
    if let Some(t) = cfg.tol_kkt {
        o.tol_kkt = t;
    }
    if let Some(m) = cfg.max_iter {
        o.max_iter = m;
    }
    o
}

fn fit_tensor(cfg: &RunConfig, p: &Panel, spec: &WeightSetSpec, t: usize) -> Result<WeightTensor, Failure> {
    let scope = if cfg.full_period_scope.unwrap_or(false) { PeriodScope::All } else { PeriodScope::Single(t) };
    Ok(solve_weights_with(p, spec, scope, &qp_options(cfg))?)
}

fn emit(cfg: &RunConfig, allowed: &[Emit]) -> Result<Emit, Failure> {
    let e = cfg.emit.unwrap_or(Emit::Json);
    if !allowed.contains(&e) {
        return Err(invalid(format!("--emit {e:?} is not available for this command").to_lowercase()));
    }
    Ok(e)
}

fn se(v: f64) -> String {
    format!("{:.4}", v.max(0.0).sqrt())
}

pub fn fit(cfg: &RunConfig) -> Out {
    let p = panel(cfg)?;
    let e = emit(cfg, &[Emit::Json, Emit::Table])?;
    let spec = family_spec(cfg, p.n_units(), "musc")?;
    let i = unit(cfg.treated_unit.as_deref().ok_or_else(|| invalid("no treated unit given (--treated-unit)"))?, &p)?;
    let t = period(cfg, &p)?;
    let a = Assignment::single(i, t);
    let tensor = fit_tensor(cfg, &p, &spec, t)?;
    let est = gsc_estimate(&p, &tensor, &a)?;
    let report = if cfg.variance.unwrap_or(false) || cfg.placebo.unwrap_or(false) {
        let opts = VarianceOptions {
            placebo: cfg.placebo.unwrap_or(false),
            truncate_negative: cfg.truncate_negative.unwrap_or(false),
        };
        Some(variance_report(&p, &tensor, &a, None, opts)?)
    } else {
        None
    };
    if e == Emit::Table {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16}{}", "family", spec.family);
        let _ = writeln!(s, "{:<16}{}", "treated unit", p.units()[i]);
        let _ = writeln!(s, "{:<16}{}", "treated period", p.periods()[t]);
        let _ = writeln!(s, "{:<16}{:.4}", "estimate", est.value);
        if let Some(r) = &report {
            let _ = writeln!(s, "{:<16}{}", "standard error", se(r.unbiased_estimate));
            if r.is_negative() {
                let _ = writeln!(s, "{:<16}{:.4} (negative)", "variance", r.unbiased_estimate);
            }
            if let Some(pl) = r.placebo_estimate {
                let _ = writeln!(s, "{:<16}{}", "placebo s.e.", se(pl));
            }
        }
        return Ok(s);
    }
    Ok(to_json_string(&json!({
        "weights": tensor.slice_json(&p, t)?,
        "objective_value": json_f64(tensor.objective_value),
        "kkt_residual": json_f64(tensor.kkt_residual),
        "estimate": est.to_json(&p),
        "variance": report.map_or(Value::Null, |r| r.to_json(&p)),
    })))
}

pub fn variance(cfg: &RunConfig) -> Out {
    let forced = RunConfig { variance: Some(true), ..cfg.clone() };
    fit(&forced)
}

pub fn placebo(cfg: &RunConfig) -> Out {
    let p = panel(cfg)?;
    let e = emit(cfg, &[Emit::Json, Emit::Table])?;
    let spec = family_spec(cfg, p.n_units(), "musc")?;
    let i = unit(cfg.treated_unit.as_deref().ok_or_else(|| invalid("no treated unit given (--treated-unit)"))?, &p)?;
    let t = period(cfg, &p)?;
    let v = placebo_variance_estimate(&p, &spec, &Assignment::single(i, t))?;
    if e == Emit::Table {
        return Ok(format!(
            "{:<16}{}\n{:<16}{:.4}\n{:<16}{}\n",
            "family",
            spec.family,
            "placebo var",
            v,
            "placebo s.e.",
            se(v)
        ));
    }
    Ok(to_json_string(&json!({
        "family": spec.family.name(),
        "treated_unit": p.units()[i],
        "treated_period": p.periods()[t],
        "placebo_variance": json_f64(v),
        "standard_error": json_f64(v.max(0.0).sqrt()),
    })))
}

pub fn network(cfg: &RunConfig) -> Out {
    let p = panel(cfg)?;
    let e = emit(cfg, &[Emit::Json, Emit::Table, Emit::Dot])?;
    let spec = family_spec(cfg, p.n_units(), "sc")?;
    let t = period(cfg, &p)?;
    let tensor = fit_tensor(cfg, &p, &spec, t)?;
    let sl = tensor.slice_checked(t)?;
    let net = slice_network(sl)?;
    let labels = p.units().to_vec();
    if e == Emit::Dot {
        return Ok(net.to_dot(&labels));
    }
    let conn = is_strongly_connected(&net);
    let centrality = eigenvector_centrality(&net);
    let props = unbiased_propensities(&tensor, t);
    if e == Emit::Table {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16}{:>12}{:>12}{:>12}{:>12}", "unit", "inflow", "outflow", "centrality", "propensity");
        for k in 0..net.n {
            let c = centrality.as_ref().map_or("-".to_owned(), |c| format!("{:.4}", c.vector[k]));
            let q = props.as_ref().map_or("-".to_owned(), |q| format!("{:.4}", q.p[k]));
            let _ =
                writeln!(s, "{:<16}{:>12.4}{:>12.4}{:>12}{:>12}", labels[k], net.inflow()[k], net.outflow()[k], c, q);
        }
        let _ = writeln!(s, "strongly connected: {}", conn.strongly_connected);
        if let Err(err) = &centrality {
            let _ = writeln!(s, "centrality: {err}");
        }
        if let Err(err) = &props {
            let _ = writeln!(s, "propensities: {err}");
        }
        return Ok(s);
    }
    let centrality_json = match &centrality {
        Ok(c) => json!({
            "vector": json_vec(c.vector.iter().copied()),
            "iterations": c.iterations,
            "shifted": c.shifted,
            "residual": json_f64(c.residual),
        }),
        Err(err) => json!({"error": err.to_string()}),
    };
    let props_json = match &props {
        Ok(q) => json!({
            "p": json_vec(q.p.iter().copied()),
            "unique": q.is_unique(),
            "classes": q.classes.iter().map(|c| json_vec(c.iter().copied())).collect::<Vec<_>>(),
            "residual": json_f64(q.residual),
            "intercept_imbalance": json_f64(q.intercept_imbalance),
        }),
        Err(err) => json!({"error": err.to_string()}),
    };
    Ok(to_json_string(&json!({
        "family": spec.family.name(),
        "treated_period": p.periods()[t],
        "network": net.to_json(&labels),
        "strongly_connected": conn.strongly_connected,
        "components": conn.components,
        "centrality": centrality_json,
        "propensities": props_json,
    })))
}

fn potential_panel(cfg: &RunConfig) -> Result<PotentialPanel, Failure> {
    if cfg.panel.is_some() {
        if cfg.generator.is_some() {
            return Err(invalid("give either --panel or --generator, not both"));
        }
        let p = panel(cfg)?;
        return Ok(match cfg.effect {
            Some(tau) => PotentialPanel::constant_effect(p, tau),
            None => PotentialPanel::zero_effect(p),
        });
    }
    let g = cfg.generator.ok_or_else(|| invalid("simulate needs --panel or --generator"))?;
    let n = cfg.n_units.unwrap_or(8);
    let t = cfg.n_periods.unwrap_or(12);
    let seed = cfg.seed.unwrap_or(0);
    Ok(match g {
        Generator::Gaussian => PotentialPanel::zero_effect(gaussian_panel(n, t, seed)),
        Generator::Adversarial => adversarial_bias_panel(n)?,
        Generator::PlaceboDownward => placebo_example_panels().downward,
        Generator::PlaceboUpward => placebo_example_panels().upward,
        Generator::Stationary => {
            let mut params = StationaryParams::default();
            if let Some(a) = cfg.ar {
                params.ar = a;
            }
            if let Some(c) = cfg.correlation {
                params.covariance = CrossCovariance::Equicorrelated { variance: 1.0, correlation: c };
            }
            stationary_synthetic_panel(n, t, &params, seed)?
        }
    })
}

fn check_subsets(n: usize, nt: usize, k_max: usize) -> Result<(), Failure> {
    if nt == 0 || nt >= n {
        return Err(invalid(format!("--nt must be between 1 and N - 1 = {}", n - 1)));
    }
    match binom_u128(n, nt) {
        Some(k) if k <= k_max as u128 => Ok(()),
        Some(k) => Err(invalid(format!("K = C({n}, {nt}) = {k} subsets exceeds k-max = {k_max}"))),
        None => Err(invalid(format!("K = C({n}, {nt}) overflows; k-max = {k_max}"))),
    }
}

pub fn simulate(cfg: &RunConfig) -> Out {
    let e = emit(cfg, &[Emit::Json, Emit::Table])?;
    let pp = potential_panel(cfg)?;
    let p = pp.y0_panel();
    let n = p.n_units();
    let names = cfg.families.clone().unwrap_or_else(|| ["dim", "did", "sc", "musc"].map(String::from).to_vec());
    let specs = names.iter().map(|f| spec_for(f, cfg, n)).collect::<Result<Vec<_>, _>>()?;
    let opts = RunOptions {
        variance: cfg.variance.unwrap_or(n >= 4),
        draws: cfg.draws.unwrap_or(10_000),
        seed: cfg.seed.unwrap_or(0),
    };
    let design = cfg.design.unwrap_or(Design::UniformUnit);
    let period_or_last = |cfg: &RunConfig| -> Result<usize, Failure> {
        if cfg.treated_period.is_none() {
            Ok(p.n_periods() - 1)
        } else {
            period(cfg, p)
        }
    };
    let report = match design {
        Design::UniformUnit => run_unit_randomization(&pp, &specs, period_or_last(cfg)?, &opts)?,
        Design::UniformTime => {
            let i = match &cfg.treated_unit {
                Some(u) => unit(u, p)?,
                None => n - 1,
            };
            run_time_randomization(&pp, &specs, i, &opts)?
        }
        Design::UniformUnitTime => run_unit_time_randomization(&pp, &specs, &opts)?,
        Design::Propensity => {
            let q = cfg.propensity.as_ref().ok_or_else(|| invalid("the propensity design needs --propensity"))?;
            let run = run_propensity_monte_carlo(&pp, &specs, q, period_or_last(cfg)?, opts.draws, opts.seed)?;
            if e == Emit::Table {
                return Ok(format!("exact\n{}\nsampled\n{}", run.exact.to_table(), run.sampled.to_table()));
            }
            return Ok(to_json_string(&json!({"exact": run.exact.to_json(), "sampled": run.sampled.to_json()})));
        }
        Design::Subset => {
            let nt = cfg.nt.ok_or_else(|| invalid("the subset design needs --nt"))?;
            check_subsets(n, nt, cfg.k_max.unwrap_or(K_MAX))?;
            run_subset_randomization(&pp, nt, period_or_last(cfg)?, &opts)?
        }
    };
    Ok(match e {
        Emit::Table => report.to_table(),
        _ => report.to_json_string(),
    })
}

pub fn multi(cfg: &RunConfig) -> Out {
    let p = panel(cfg)?;
    let e = emit(cfg, &[Emit::Json, Emit::Table])?;
    let labels = cfg.treated_units.as_ref().ok_or_else(|| invalid("multi needs --treated-units"))?;
    let units = labels.iter().map(|l| unit(l, &p)).collect::<Result<Vec<_>, _>>()?;
    let n = p.n_units();
    check_subsets(n, units.len(), cfg.k_max.unwrap_or(K_MAX))?;
    let t = period(cfg, &p)?;
    let a = Assignment::subset(units, t)?;
    let scope = if cfg.full_period_scope.unwrap_or(false) { PeriodScope::All } else { PeriodScope::Single(t) };
    let mt = solve_multi_weights_scoped(&p, a.n_treated(), scope)?;
    let est = multi_gsc_estimate(&p, &mt, &a)?;
    let v = if cfg.variance.unwrap_or(true) { Some(multi_unbiased_variance_estimate(&p, &mt, &a)?) } else { None };
    if e == Emit::Table {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16}{}", "treated units", labels.join(","));
        let _ = writeln!(s, "{:<16}{}", "treated period", p.periods()[t]);
        let _ = writeln!(s, "{:<16}{}", "subsets", mt.index.len());
        let _ = writeln!(s, "{:<16}{:.4}", "estimate", est.value);
        if let Some(v) = v {
            let _ = writeln!(s, "{:<16}{}", "standard error", se(v));
        }
        return Ok(s);
    }
    Ok(to_json_string(&json!({
        "weights": mt.to_json(&p),
        "estimate": est.to_json(&p),
        "variance_estimate": v.map_or(Value::Null, json_f64),
        "standard_error": v.map_or(Value::Null, |v| json_f64(v.max(0.0).sqrt())),
        "negative_estimate": v.is_some_and(|v| v < 0.0),
    })))
}
