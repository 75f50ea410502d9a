//! Panels of outcomes, potential outcomes, assignments and assignment designs.
//!
//! A panel is an `N × T` matrix with unit labels on the rows and period
//! labels on the columns. On disk it is a CSV file whose header row holds the
//! period labels (after a corner cell) and whose first column holds the unit
//! labels:
//!
//! ```text
//! unit,1,2
//! AZ,1,1
//! CA,2,2.5
//! NY,3,3
//! ```

use crate::error::{Error, Result};
use crate::numfmt::{fmt_f64, json_f64};
use nalgebra::DMatrix;
use serde_json::{json, Value};
use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

/// Observed outcomes for `N` units over `T` periods.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    units: Vec<String>,
    periods: Vec<String>,
    y: DMatrix<f64>,
}

impl Panel {
    /// Build a panel from row-major outcome rows, one row per unit.
    pub fn new(units: Vec<String>, periods: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != units.len() {
            return Err(Error::Dimension(format!("{} unit labels but {} rows", units.len(), rows.len())));
        }
        let t = periods.len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != t {
                return Err(Error::Dimension(format!("row {} has {} values, expected {t}", units[i], r.len())));
            }
        }
        let y = DMatrix::from_fn(units.len(), t, |i, s| rows[i][s]);
        Self::from_matrix(units, periods, y)
    }

    pub fn from_matrix(units: Vec<String>, periods: Vec<String>, y: DMatrix<f64>) -> Result<Self> {
        if y.nrows() != units.len() || y.ncols() != periods.len() {
            return Err(Error::Dimension(format!(
                "matrix is {}x{} but labels give {}x{}",
                y.nrows(),
                y.ncols(),
                units.len(),
                periods.len()
            )));
        }
        if units.len() < 2 || periods.len() < 2 {
            return Err(Error::Invalid(format!(
                "a panel needs at least 2 units and 2 periods, got {}x{}",
                units.len(),
                periods.len()
            )));
        }
        check_unique(&units, "unit")?;
        check_unique(&periods, "period")?;
        if let Some(k) = y.iter().position(|v| !v.is_finite()) {
            let (i, s) = (k % y.nrows(), k / y.nrows());
            return Err(Error::Invalid(format!("non-finite outcome at unit {}, period {}", units[i], periods[s])));
        }
        Ok(Panel { units, periods, y })
    }

    /// Panel with generated labels `u1..uN` and `1..T`.
    pub fn from_unlabeled(y: DMatrix<f64>) -> Result<Self> {
        let units = (1..=y.nrows()).map(|i| format!("u{i}")).collect();
        let periods = (1..=y.ncols()).map(|s| s.to_string()).collect();
        Self::from_matrix(units, periods, y)
    }

    pub fn n_units(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.y.ncols()
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn periods(&self) -> &[String] {
        &self.periods
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn unit_index(&self, label: &str) -> Option<usize> {
        self.units.iter().position(|u| u == label)
    }

    pub fn period_index(&self, label: &str) -> Option<usize> {
        self.periods.iter().position(|p| p == label)
    }

    /// Same labels, new outcomes.
    pub fn with_y(&self, y: DMatrix<f64>) -> Result<Self> {
        Self::from_matrix(self.units.clone(), self.periods.clone(), y)
    }

    /// Drop one unit, keeping order.
    pub fn without_unit(&self, i: usize) -> Result<Self> {
        let units = self.units.iter().enumerate().filter(|&(k, _)| k != i).map(|(_, u)| u.clone()).collect();
        Self::from_matrix(units, self.periods.clone(), self.y.clone().remove_row(i))
    }

    pub fn to_json(&self) -> Value {
        json!({
            "units": self.units,
            "periods": self.periods,
            "y": matrix_json(&self.y),
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let labels = |key: &str| -> Result<Vec<String>> {
            v[key]
                .as_array()
                .ok_or_else(|| parse_err(key, "expected an array of labels"))?
                .iter()
                .map(|x| x.as_str().map(str::to_owned).ok_or_else(|| parse_err(key, "labels must be strings")))
                .collect()
        };
        let units = labels("units")?;
        let periods = labels("periods")?;
        let rows = v["y"].as_array().ok_or_else(|| parse_err("y", "expected a matrix"))?;
        let mut out = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_array().ok_or_else(|| parse_err(&format!("y[{i}]"), "expected a row"))?;
            let row = r
                .iter()
                .enumerate()
                .map(|(s, x)| x.as_f64().ok_or_else(|| parse_err(&format!("y[{i}][{s}]"), "expected a number")))
                .collect::<Result<Vec<_>>>()?;
            out.push(row);
        }
        Self::new(units, periods, out)
    }
}

fn parse_err(location: &str, message: &str) -> Error {
    Error::Parse { location: location.into(), message: message.into() }
}

fn check_unique(labels: &[String], kind: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for l in labels {
        if !seen.insert(l.as_str()) {
            return Err(Error::Invalid(format!("duplicate {kind} label {l:?}")));
        }
    }
    Ok(())
}

pub(crate) fn matrix_json(m: &DMatrix<f64>) -> Value {
    Value::Array((0..m.nrows()).map(|i| Value::Array(m.row(i).iter().map(|&x| json_f64(x)).collect())).collect())
}

/// CSV dialect options for [`load_panel`].
#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub delimiter: u8,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions { delimiter: b',' }
    }
}

/// Read a panel CSV from disk.
pub fn load_panel(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<Panel> {
    let f = std::fs::File::open(path.as_ref())?;
    read_panel(f, opts)
}

/// Parse a panel CSV from any reader. Errors name the offending line and column.
pub fn read_panel<R: Read>(reader: R, opts: &CsvOptions) -> Result<Panel> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter)
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| parse_err("line 1", &e.to_string()))?,
        None => return Err(parse_err("line 1", "empty file")),
    };
    let periods: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    if let Some(k) = periods.iter().position(String::is_empty) {
        return Err(parse_err(&format!("line 1, column {}", k + 2), "empty period label"));
    }
    let mut units = Vec::new();
    let mut rows = Vec::new();
    for (n, rec) in records.enumerate() {
        let line = n + 2;
        let rec = rec.map_err(|e| parse_err(&format!("line {line}"), &e.to_string()))?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if rec.len() != periods.len() + 1 {
            return Err(parse_err(
                &format!("line {line}"),
                &format!("expected {} fields, found {}", periods.len() + 1, rec.len()),
            ));
        }
        let label = rec[0].to_owned();
        if label.is_empty() {
            return Err(parse_err(&format!("line {line}, column 1"), "empty unit label"));
        }
        let mut row = Vec::with_capacity(periods.len());
        for (s, cell) in rec.iter().skip(1).enumerate() {
            let loc = || format!("line {line}, column {} (unit {label:?}, period {:?})", s + 2, periods[s]);
            if cell.is_empty() {
                return Err(parse_err(&loc(), "missing value"));
            }
            let v: f64 = cell.parse().map_err(|_| parse_err(&loc(), &format!("not a number: {cell:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(&loc(), "value is not finite"));
            }
            row.push(v);
        }
        units.push(label);
        rows.push(row);
    }
    Panel::new(units, periods, rows).map_err(|e| match e {
        Error::Invalid(m) | Error::Dimension(m) => parse_err("panel", &m),
        e => e,
    })
}

/// Write a panel as CSV with 17 significant digits per value.
pub fn write_panel<W: Write>(panel: &Panel, writer: W, corner: &str) -> Result<()> {
    write_matrix_csv(writer, corner, panel.units(), panel.periods(), panel.y())
}

pub fn save_panel(panel: &Panel, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path.as_ref())?;
    write_panel(panel, std::io::BufWriter::new(f), "unit")
}

pub(crate) fn write_matrix_csv<W: Write>(
    writer: W,
    corner: &str,
    rows: &[String],
    cols: &[String],
    m: &DMatrix<f64>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![corner.to_owned()];
    header.extend(cols.iter().cloned());
    w.write_record(&header).map_err(csv_io)?;
    for (i, label) in rows.iter().enumerate() {
        let mut rec = vec![label.clone()];
        rec.extend(m.row(i).iter().map(|&x| fmt_f64(x)));
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Control and treated potential outcomes on a common set of labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialPanel {
    y0: Panel,
    y1: DMatrix<f64>,
}

impl PotentialPanel {
    pub fn new(y0: Panel, y1: DMatrix<f64>) -> Result<Self> {
        if y1.shape() != y0.y().shape() {
            return Err(Error::Dimension(format!("Y(1) is {:?} but Y(0) is {:?}", y1.shape(), y0.y().shape())));
        }
        if y1.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("Y(1) has non-finite entries".into()));
        }
        Ok(PotentialPanel { y0, y1 })
    }

    /// `Y(1) = Y(0)` everywhere.
    pub fn zero_effect(y0: Panel) -> Self {
        let y1 = y0.y().clone();
        PotentialPanel { y0, y1 }
    }

    /// `Y(1) = Y(0) + tau` everywhere.
    pub fn constant_effect(y0: Panel, tau: f64) -> Self {
        let y1 = y0.y().add_scalar(tau);
        PotentialPanel { y0, y1 }
    }

    pub fn y0_panel(&self) -> &Panel {
        &self.y0
    }

    pub fn y0(&self) -> &DMatrix<f64> {
        self.y0.y()
    }

    pub fn y1(&self) -> &DMatrix<f64> {
        &self.y1
    }

    pub fn n_units(&self) -> usize {
        self.y0.n_units()
    }

    pub fn n_periods(&self) -> usize {
        self.y0.n_periods()
    }

    /// The panel an analyst would see under assignment `a`.
    pub fn observed(&self, a: &Assignment) -> Panel {
        let mut y = self.y0.y().clone();
        let t = a.treated_period();
        for &i in a.treated_units() {
            y[(i, t)] = self.y1[(i, t)];
        }
        Panel { units: self.y0.units.clone(), periods: self.y0.periods.clone(), y }
    }

    pub fn to_json(&self) -> Value {
        json!({
            "units": self.y0.units(),
            "periods": self.y0.periods(),
            "y0": matrix_json(self.y0.y()),
            "y1": matrix_json(&self.y1),
        })
    }
}

/// Treated units (sorted, distinct) and the treated period.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Assignment {
    treated_units: Vec<usize>,
    treated_period: usize,
}

impl Assignment {
    pub fn single(unit: usize, period: usize) -> Self {
        Assignment { treated_units: vec![unit], treated_period: period }
    }

    pub fn subset(mut units: Vec<usize>, period: usize) -> Result<Self> {
        units.sort_unstable();
        units.dedup();
        if units.is_empty() {
            return Err(Error::Invalid("an assignment needs at least one treated unit".into()));
        }
        Ok(Assignment { treated_units: units, treated_period: period })
    }

    pub fn treated_units(&self) -> &[usize] {
        &self.treated_units
    }

    pub fn treated_period(&self) -> usize {
        self.treated_period
    }

    /// The single treated unit, if there is exactly one.
    pub fn unit(&self) -> Option<usize> {
        match self.treated_units[..] {
            [i] => Some(i),
            _ => None,
        }
    }

    pub fn n_treated(&self) -> usize {
        self.treated_units.len()
    }

    pub fn is_treated(&self, i: usize) -> bool {
        self.treated_units.binary_search(&i).is_ok()
    }

    /// Check indices against an `n × t` panel and `1 ≤ N_T ≤ N − 1`.
    pub fn check(&self, n: usize, t: usize) -> Result<()> {
        if self.treated_period >= t {
            return Err(Error::Invalid(format!("treated period {} out of range 0..{t}", self.treated_period)));
        }
        if let Some(&i) = self.treated_units.iter().find(|&&i| i >= n) {
            return Err(Error::Invalid(format!("treated unit {i} out of range 0..{n}")));
        }
        if self.treated_units.len() >= n {
            return Err(Error::Invalid(format!(
                "{} treated units leaves no controls among {n}",
                self.treated_units.len()
            )));
        }
        Ok(())
    }
}

/// Distribution of the assignment.
#[derive(Debug, Clone, PartialEq)]
pub enum AssignmentDesign {
    /// One unit drawn uniformly; fixed period.
    UniformUnit,
    /// One period drawn uniformly; fixed unit.
    UniformTime,
    /// Unit and period drawn independently and uniformly.
    UniformUnitAndTime,
    /// One unit drawn with the given probabilities; fixed period.
    Propensity(Vec<f64>),
    /// A subset of the given size drawn uniformly; fixed period.
    UniformSubset(usize),
}

impl AssignmentDesign {
    pub fn name(&self) -> &'static str {
        match self {
            AssignmentDesign::UniformUnit => "uniform-unit",
            AssignmentDesign::UniformTime => "uniform-time",
            AssignmentDesign::UniformUnitAndTime => "uniform-unit-and-time",
            AssignmentDesign::Propensity(_) => "propensity",
            AssignmentDesign::UniformSubset(_) => "uniform-subset",
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            AssignmentDesign::Propensity(p) => {
                json!({"kind": self.name(), "propensity": crate::numfmt::json_vec(p.iter().copied())})
            }
            AssignmentDesign::UniformSubset(k) => json!({"kind": self.name(), "n_treated": k}),
            _ => json!({"kind": self.name()}),
        }
    }
}

/// Tolerance on the propensity sum.
pub const PROPENSITY_SUM_TOL: f64 = 1e-12;

/// Check that a propensity vector lies on the simplex.
pub fn check_propensity(p: &[f64], n: usize) -> Result<()> {
    if p.len() != n {
        return Err(Error::Dimension(format!("propensity has length {}, panel has {n} units", p.len())));
    }
    if let Some((i, v)) = p.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0) {
        return Err(Error::Invalid(format!("propensity {v} for unit {i} is outside [0, 1]")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > PROPENSITY_SUM_TOL {
        return Err(Error::Invalid(format!("propensities sum to {s}, not 1")));
    }
    Ok(())
}

/// Confirm a design is compatible with a panel and return it unchanged.
pub fn validate_design(design: AssignmentDesign, panel: &Panel) -> Result<AssignmentDesign> {
    let n = panel.n_units();
    match &design {
        AssignmentDesign::Propensity(p) => check_propensity(p, n)?,
        AssignmentDesign::UniformSubset(k) if *k == 0 || *k >= n => {
            return Err(Error::Invalid(format!("subset size {k} must be between 1 and N - 1 = {}", n - 1)));
        }
        _ => {}
    }
    Ok(design)
}
