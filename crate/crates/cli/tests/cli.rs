use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gsc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsc")).args(args).env_remove("GSC_WORKERS").output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn equidistant(dir: &Path) -> String {
    write(dir, "equidistant.csv", "state,1,2\nAZ,1,1\nCA,2,2\nNY,3,3\n").display().to_string()
}

/// Six units over eight periods, no ties.
fn six(dir: &Path) -> String {
    let mut text = String::from("unit,1980,1981,1982,1983,1984,1985,1986,1987\n");
    for i in 0..6 {
        let row: Vec<String> =
            (0..8).map(|s| format!("{}", ((i * 7 + s * 3) % 11) as f64 * 0.5 + (i * s) as f64 * 0.1)).collect();
        text.push_str(&format!("u{i},{}\n", row.join(",")));
    }
    write(dir, "six.csv", &text).display().to_string()
}

#[test]
fn fit_reports_weights_estimate_and_variance() {
    let dir = tempfile::tempdir().unwrap();
    let p = six(dir.path());
    let out = gsc(&[
        "fit",
        "--panel",
        &p,
        "--family",
        "musc",
        "--treated-unit",
        "u2",
        "--treated-period",
        "1987",
        "--variance",
    ]);
    let j = stdout_json(&out);
    assert_eq!(j["estimate"]["family"], "musc");
    assert_eq!(j["estimate"]["treated_units"][0], "u2");
    assert!(j["variance"]["unbiased_estimate"].is_number());
    assert!(j["kkt_residual"].as_f64().unwrap() <= 1e-8);
    assert_eq!(j["weights"]["units"][2], "u2");
}

#[test]
fn unknown_family_lists_the_valid_ones() {
    let dir = tempfile::tempdir().unwrap();
    let p = equidistant(dir.path());
    let out = gsc(&["fit", "--panel", &p, "--family", "lasso", "--treated-unit", "CA", "--treated-period", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("dim, did, sc, msc, usc, musc, musc_p"));
}

#[test]
fn variance_on_three_units_cites_the_size_requirement() {
    let dir = tempfile::tempdir().unwrap();
    let p = equidistant(dir.path());
    let out = gsc(&["variance", "--panel", &p, "--family", "usc", "--treated-unit", "CA", "--treated-period", "last"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("N >= 4"), "{}", stderr(&out));
}

#[test]
fn network_on_the_three_unit_panel() {
    let dir = tempfile::tempdir().unwrap();
    let p = equidistant(dir.path());
    let j = stdout_json(&gsc(&["network", "--panel", &p, "--family", "sc", "--treated-period", "last"]));
    let props: Vec<f64> = j["propensities"]["p"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    for (got, want) in props.iter().zip([0.25, 0.5, 0.25]) {
        assert!((got - want).abs() < 1e-9);
    }
    assert_eq!(j["strongly_connected"], true);
    let dot = gsc(&["network", "--panel", &p, "--treated-period", "last", "--emit", "dot"]);
    let text = String::from_utf8(dot.stdout).unwrap();
    assert!(text.starts_with("digraph") && text.contains("\"CA\" -> \"AZ\""), "{text}");
}

#[test]
fn simulate_bias_pattern_on_a_zero_effect_panel() {
    let out = gsc(&[
        "simulate",
        "--generator",
        "gaussian",
        "--n-units",
        "6",
        "--n-periods",
        "8",
        "--seed",
        "3",
        "--design",
        "uniform-unit",
        "--families",
        "dim,sc,musc,did",
    ]);
    let j = stdout_json(&out);
    let bias = |k: usize| j["rows"][k]["bias"].as_f64().unwrap();
    assert!(bias(0).abs() < 1e-8 && bias(2).abs() < 1e-8 && bias(3).abs() < 1e-8);
    assert!(bias(1).abs() > 1e-6);
    let table =
        gsc(&["simulate", "--generator", "adversarial", "--n-units", "5", "--families", "sc,musc", "--emit", "table"]);
    let text = String::from_utf8(table.stdout).unwrap();
    assert!(text.contains("Bias") && text.contains("0.6000"), "{text}");
}

#[test]
fn subset_design_over_k_max_is_rejected() {
    let out = gsc(&[
        "simulate",
        "--generator",
        "gaussian",
        "--n-units",
        "12",
        "--design",
        "subset",
        "--nt",
        "4",
        "--k-max",
        "100",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("495"), "{}", stderr(&out));
    let ok = gsc(&["simulate", "--generator", "gaussian", "--n-units", "6", "--design", "subset", "--nt", "2"]);
    let j = stdout_json(&ok);
    assert_eq!(j["replication"]["cells"], 15);
    assert!(j["rows"][0]["bias"].as_f64().unwrap().abs() < 1e-8);
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let p = six(dir.path());
    let cfg = write(
        dir.path(),
        "run.toml",
        &format!("panel = {p:?}\nfamily = \"sc\"\ntreated-unit = \"u1\"\ntreated-period = \"last\"\n"),
    );
    let cfg = cfg.to_str().unwrap();
    let a = stdout_json(&gsc(&["fit", "--config", cfg]));
    assert_eq!(a["estimate"]["family"], "sc");
    let b = stdout_json(&gsc(&["fit", "--config", cfg, "--family", "did"]));
    assert_eq!(b["estimate"]["family"], "did");
    let bad = write(dir.path(), "bad.toml", "famly = \"sc\"\n");
    let out = gsc(&["fit", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("famly"));
}

#[test]
fn runs_are_byte_identical() {
    let args = [
        "simulate",
        "--generator",
        "stationary",
        "--n-units",
        "5",
        "--n-periods",
        "30",
        "--design",
        "uniform-unit-time",
        "--seed",
        "9",
    ];
    let a = gsc(&args);
    let b = Command::new(env!("CARGO_BIN_EXE_gsc")).args(args).env("GSC_WORKERS", "3").output().unwrap();
    assert!(a.status.success() && b.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn multi_units_and_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = six(dir.path());
    let dest = dir.path().join("multi.json");
    let out = gsc(&[
        "multi",
        "--panel",
        &p,
        "--treated-units",
        "u0,u3",
        "--treated-period",
        "1986",
        "--output",
        dest.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let j: Value = serde_json::from_str(&std::fs::read_to_string(&dest).unwrap()).unwrap();
    assert_eq!(j["weights"]["n_treated"], 2);
    assert_eq!(j["estimate"]["treated_units"][1], "u3");
    assert!(j["variance_estimate"].is_number());
}

#[test]
fn parse_errors_name_the_cell() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "broken.csv", "unit,1,2\nA,1,2\nB,3,oops\nC,1,1\n");
    let out = gsc(&["fit", "--panel", p.to_str().unwrap(), "--treated-unit", "A", "--treated-period", "2"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains("line 3") && msg.contains("column 3"), "{msg}");
}

#[test]
fn placebo_and_table_output() {
    let dir = tempfile::tempdir().unwrap();
    let p = six(dir.path());
    let j = stdout_json(&gsc(&[
        "placebo",
        "--panel",
        &p,
        "--family",
        "musc",
        "--treated-unit",
        "u4",
        "--treated-period",
        "last",
    ]));
    assert!(j["placebo_variance"].as_f64().unwrap() >= 0.0);
    let t = gsc(&[
        "fit",
        "--panel",
        &p,
        "--treated-unit",
        "u4",
        "--treated-period",
        "last",
        "--variance",
        "--emit",
        "table",
    ]);
    let text = String::from_utf8(t.stdout).unwrap();
    assert!(text.contains("standard error"), "{text}");
    let dot = gsc(&["fit", "--panel", &p, "--treated-unit", "u4", "--treated-period", "last", "--emit", "dot"]);
    assert_eq!(dot.status.code(), Some(2));
}
