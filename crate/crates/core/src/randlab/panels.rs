use crate::error::{Error, Result};
use crate::panel::{Panel, PotentialPanel};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `n × t` panel of independent standard normal outcomes.
pub fn gaussian_panel(n: usize, t: usize, seed: u64) -> Panel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = DMatrix::from_fn(n, t, |_, _| StandardNormal.sample(&mut rng));
    Panel::from_unlabeled(y).expect("a gaussian panel is finite")
}

/// Binary panel on which synthetic control weights are badly biased.
///
/// `T = n`. Unit 0 is zero throughout. Unit `i ≥ 1` is one at period `i − 1`
/// and at the last period, zero elsewhere. Effects are zero. At the last
/// period the SC weights give unit 0 weight `1/(n−1)` on every other unit and
/// give every other unit all its weight on unit 0, so the SC bias under
/// uniform unit assignment is `(n − 2)/n`.
pub fn adversarial_bias_panel(n: usize) -> Result<PotentialPanel> {
    if n < 4 {
        return Err(Error::UnsupportedSize(format!("the adversarial panel needs n >= 4, got {n}")));
    }
    let y = DMatrix::from_fn(n, n, |i, s| if i > 0 && (s == i - 1 || s == n - 1) { 1.0 } else { 0.0 });
    Ok(PotentialPanel::zero_effect(Panel::from_unlabeled(y)?))
}

/// The two four-unit, three-period panels on which the placebo variance is
/// biased; effects are zero and the last period is the treated one.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaceboExamples {
    /// Matched pairs of units that disagree by one at the last period: the
    /// exact variance is one and the placebo variance is smaller on average.
    pub downward: PotentialPanel,
    /// Matched pairs that agree exactly at the last period: the exact
    /// variance is zero and the placebo variance is positive.
    pub upward: PotentialPanel,
}

/// [`placebo_examples_with`] at `(a, b, c, d) = (0, 1, 1, 0)`.
pub fn placebo_example_panels() -> PlaceboExamples {
    placebo_examples_with(0.0, 1.0, 1.0, 0.0).expect("default parameters pair the units")
}

/// Units 0 and 1 follow `(a, b)` over the first two periods and units 2 and
/// 3 follow `(c, d)`. The MUSC weights pair the units only when the centered
/// paths differ, so `b − a` must differ from `d − c`.
pub fn placebo_examples_with(a: f64, b: f64, c: f64, d: f64) -> Result<PlaceboExamples> {
    if ((b - a) - (d - c)).abs() < 1e-12 {
        return Err(Error::Invalid(
            "with b - a = d - c every unit fits every other and the weights are not matched pairs".into(),
        ));
    }
    let build = |last: [f64; 4]| -> Result<PotentialPanel> {
        let rows = vec![vec![a, b, last[0]], vec![a, b, last[1]], vec![c, d, last[2]], vec![c, d, last[3]]];
        let units = (1..=4).map(|i| format!("u{i}")).collect();
        let periods = (1..=3).map(|s| s.to_string()).collect();
        Ok(PotentialPanel::zero_effect(Panel::new(units, periods, rows)?))
    };
    Ok(PlaceboExamples { downward: build([0.0, 1.0, 0.0, 1.0])?, upward: build([1.0, 1.0, 0.0, 0.0])? })
}

/// Cross-unit covariance of the stationary generator.
#[derive(Debug, Clone, PartialEq)]
pub enum CrossCovariance {
    /// Common variance, common pairwise correlation.
    Equicorrelated {
        variance: f64,
        correlation: f64,
    },
    /// `variance · decay^|i − j|`.
    Toeplitz {
        variance: f64,
        decay: f64,
    },
    Custom(DMatrix<f64>),
}

impl CrossCovariance {
    pub fn matrix(&self, n: usize) -> Result<DMatrix<f64>> {
        Ok(match self {
            CrossCovariance::Equicorrelated { variance, correlation } => {
                DMatrix::from_fn(n, n, |i, j| if i == j { *variance } else { variance * correlation })
            }
            CrossCovariance::Toeplitz { variance, decay } => {
                DMatrix::from_fn(n, n, |i, j| variance * decay.powi((i as i32 - j as i32).abs()))
            }
            CrossCovariance::Custom(m) => {
                if m.nrows() != n || m.ncols() != n {
                    return Err(Error::Dimension(format!("covariance is {}x{}, need {n}x{n}", m.nrows(), m.ncols())));
                }
                m.clone()
            }
        })
    }
}

/// Parameters of [`stationary_synthetic_panel`].
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryParams {
    /// AR(1) coefficient, `|ar| < 1`.
    pub ar: f64,
    /// Covariance of the innovations across units.
    pub covariance: CrossCovariance,
    /// Per-unit levels added to the process; zero when absent.
    pub unit_means: Option<Vec<f64>>,
}

impl Default for StationaryParams {
    fn default() -> Self {
        StationaryParams {
            ar: 0.5,
            covariance: CrossCovariance::Equicorrelated { variance: 1.0, correlation: 0.7 },
            unit_means: None,
        }
    }
}

/// Stationary Gaussian panel: `x_t = ar · x_{t−1} + e_t` with
/// `e_t ~ N(0, Σ)` across units, started from the stationary law
/// `N(0, Σ/(1 − ar²))`. Effects are zero.
pub fn stationary_synthetic_panel(n: usize, t: usize, params: &StationaryParams, seed: u64) -> Result<PotentialPanel> {
    if n == 0 || t == 0 {
        return Err(Error::Dimension("the panel needs at least one unit and one period".into()));
    }
    if !(params.ar.abs() < 1.0) {
        return Err(Error::Invalid(format!("AR coefficient {} is not in (-1, 1)", params.ar)));
    }
    let sigma = params.covariance.matrix(n)?;
    if (&sigma - sigma.transpose()).amax() > 1e-12 * sigma.amax().max(1.0) {
        return Err(Error::Invalid("cross-unit covariance is not symmetric".into()));
    }
    let chol =
        sigma.cholesky().ok_or_else(|| Error::Invalid("cross-unit covariance is not positive definite".into()))?;
    let l = chol.l();
    let means = match &params.unit_means {
        Some(m) if m.len() != n => {
            return Err(Error::Dimension(format!("{} unit means for {n} units", m.len())));
        }
        Some(m) => DVector::from_column_slice(m),
        None => DVector::zeros(n),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> DVector<f64> { &l * DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng)) };
    let mut y = DMatrix::zeros(n, t);
    let mut x = draw() / (1.0 - params.ar * params.ar).sqrt();
    for s in 0..t {
        if s > 0 {
            x = &x * params.ar + draw();
        }
        y.set_column(s, &(&x + &means));
    }
    Ok(PotentialPanel::zero_effect(Panel::from_unlabeled(y)?))
}

/// `(1/T) Σ_t (Y_t − Ȳ)(Y_t − Ȳ)ᵀ` over the periods of a panel.
pub fn sample_cross_covariance(y: &DMatrix<f64>) -> DMatrix<f64> {
    let t = y.ncols() as f64;
    let mean = y.column_mean();
    let centered = DMatrix::from_fn(y.nrows(), y.ncols(), |i, s| y[(i, s)] - mean[i]);
    &centered * centered.transpose() / t
}
