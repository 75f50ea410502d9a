use crate::numfmt::{json_f64, to_json_string};
use crate::panel::AssignmentDesign;
use serde_json::{json, Map, Value};
use std::fmt::Write as _;

/// Summary of one estimator over an assignment distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorRow {
    pub estimator: String,
    pub bias: f64,
    pub rmse: f64,
    /// Spread of the error around the bias; `rmse² = bias² + variance`.
    pub variance: f64,
    /// Mean of `sqrt(max(V̂, 0))`; absent when no variance estimator applies.
    pub avg_standard_error: Option<f64>,
    /// Mean of `V̂` itself.
    pub avg_variance_estimate: Option<f64>,
    /// Mean over cells of the exact variance under uniform unit assignment.
    pub exact_variance_mean: Option<f64>,
    /// Monte Carlo standard error of `bias`; sampled runs only.
    pub bias_standard_error: Option<f64>,
    /// Set when the estimator failed; the numbers are then `NaN`.
    pub error: Option<String>,
}

impl EstimatorRow {
    pub(crate) fn failed(estimator: &str, msg: String) -> Self {
        EstimatorRow {
            estimator: estimator.to_owned(),
            bias: f64::NAN,
            rmse: f64::NAN,
            variance: f64::NAN,
            avg_standard_error: None,
            avg_variance_estimate: None,
            exact_variance_mean: None,
            bias_standard_error: None,
            error: Some(msg),
        }
    }

    fn to_json(&self) -> Value {
        let opt = |v: Option<f64>| v.map_or(Value::Null, json_f64);
        let mut m = Map::new();
        m.insert("estimator".into(), json!(self.estimator));
        m.insert("bias".into(), json_f64(self.bias));
        m.insert("rmse".into(), json_f64(self.rmse));
        m.insert("variance".into(), json_f64(self.variance));
        m.insert("avg_standard_error".into(), opt(self.avg_standard_error));
        m.insert("avg_variance_estimate".into(), opt(self.avg_variance_estimate));
        m.insert("exact_variance_mean".into(), opt(self.exact_variance_mean));
        m.insert("bias_standard_error".into(), opt(self.bias_standard_error));
        m.insert("error".into(), self.error.as_ref().map_or(Value::Null, |e| json!(e)));
        Value::Object(m)
    }
}

/// One cell of an assignment distribution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Cell {
    pub prob: f64,
    pub error: f64,
    pub variance_estimate: Option<f64>,
    pub exact_variance: Option<f64>,
}

/// Weighted moments of a list of cells; the probabilities must sum to one.
pub(crate) fn summarize(estimator: &str, cells: &[Cell], sampled: bool) -> EstimatorRow {
    let bias: f64 = cells.iter().map(|c| c.prob * c.error).sum();
    let mse: f64 = cells.iter().map(|c| c.prob * c.error * c.error).sum();
    let variance: f64 = cells.iter().map(|c| c.prob * (c.error - bias).powi(2)).sum();
    let mean_of = |f: &dyn Fn(&Cell) -> Option<f64>| -> Option<f64> {
        cells.iter().map(|c| f(c).map(|v| c.prob * v)).sum::<Option<f64>>()
    };
    let bias_se = if sampled && cells.len() > 1 {
        let n = cells.len() as f64;
        Some((variance * n / (n - 1.0) / n).sqrt())
    } else {
        None
    };
    EstimatorRow {
        estimator: estimator.to_owned(),
        bias,
        rmse: mse.sqrt(),
        variance,
        avg_standard_error: mean_of(&|c| c.variance_estimate.map(|v| v.max(0.0).sqrt())),
        avg_variance_estimate: mean_of(&|c| c.variance_estimate),
        exact_variance_mean: mean_of(&|c| c.exact_variance),
        bias_standard_error: bias_se,
        error: None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Replication {
    Enumerated { cells: usize },
    Sampled { seed: u64, draws: usize },
}

impl Replication {
    fn to_json(&self) -> Value {
        match self {
            Replication::Enumerated { cells } => json!({"method": "enumerated", "cells": cells}),
            Replication::Sampled { seed, draws } => json!({"method": "sampled", "seed": seed, "draws": draws}),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub design: AssignmentDesign,
    /// Fixed coordinate of the design (the period for unit designs, the unit for time designs).
    pub treated_period: Option<usize>,
    pub treated_unit: Option<usize>,
    pub replication: Replication,
    pub rows: Vec<EstimatorRow>,
}

impl ExperimentReport {
    pub fn row(&self, estimator: &str) -> Option<&EstimatorRow> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("design".into(), self.design.to_json());
        m.insert("treated_period".into(), self.treated_period.map_or(Value::Null, |t| json!(t)));
        m.insert("treated_unit".into(), self.treated_unit.map_or(Value::Null, |i| json!(i)));
        m.insert("replication".into(), self.replication.to_json());
        m.insert("rows".into(), Value::Array(self.rows.iter().map(EstimatorRow::to_json).collect()));
        Value::Object(m)
    }

    pub fn to_json_string(&self) -> String {
        to_json_string(&self.to_json())
    }

    /// Fixed-width table: one column per estimator, rows Bias, RMSE and
    /// Average standard error.
    pub fn to_table(&self) -> String {
        const W: usize = 12;
        let mut s = String::new();
        let _ = write!(s, "{:<24}", "");
        for r in &self.rows {
            let _ = write!(s, "{:>W$}", r.estimator.to_uppercase());
        }
        s.push('\n');
        let num = |v: f64| if v.is_finite() { format!("{v:>W$.4}") } else { format!("{:>W$}", "-") };
        let lines: [(&str, &dyn Fn(&EstimatorRow) -> f64); 3] = [
            ("Bias", &|r| r.bias),
            ("RMSE", &|r| r.rmse),
            ("Average standard error", &|r| r.avg_standard_error.unwrap_or(f64::NAN)),
        ];
        for (label, f) in lines {
            let _ = write!(s, "{label:<24}");
            for r in &self.rows {
                s.push_str(&num(f(r)));
            }
            s.push('\n');
        }
        for r in self.rows.iter().filter(|r| r.error.is_some()) {
            let _ = writeln!(s, "{}: {}", r.estimator, r.error.as_deref().unwrap_or(""));
        }
        s
    }
}
