use clap::{Args, ValueEnum};
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emit {
    Json,
    Table,
    Dot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Design {
    UniformUnit,
    UniformTime,
    UniformUnitTime,
    Propensity,
    Subset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    Gaussian,
    Adversarial,
    PlaceboDownward,
    PlaceboUpward,
    Stationary,
}

/// Settings shared by every subcommand. Each field can come from the config
/// file or from a flag; flags win.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RunConfig {
    /// Panel CSV: header row of period labels, one row per unit.
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// Field delimiter of the panel CSV.
    #[arg(long)]
    pub delimiter: Option<char>,
    /// Weight-set family: dim, did, sc, msc, usc, musc, musc_p.
    #[arg(long)]
    pub family: Option<String>,
    /// Comma-separated families for `simulate`.
    #[arg(long, value_delimiter = ',')]
    pub families: Option<Vec<String>>,
    /// Comma-separated assignment probabilities, one per unit.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub propensity: Option<Vec<f64>>,
    #[arg(long)]
    pub treated_unit: Option<String>,
    /// Comma-separated unit labels for `multi`.
    #[arg(long, value_delimiter = ',')]
    pub treated_units: Option<Vec<String>>,
    /// Period label, or `last`.
    #[arg(long)]
    pub treated_period: Option<String>,
    #[arg(long, value_enum)]
    pub design: Option<Design>,
    /// Number of treated units in the subset design.
    #[arg(long)]
    pub nt: Option<usize>,
    /// Largest number of treated subsets to enumerate.
    #[arg(long)]
    pub k_max: Option<usize>,
    /// Monte Carlo draws when the support is sampled.
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Synthetic panel for `simulate` when no panel file is given.
    #[arg(long, value_enum)]
    pub generator: Option<Generator>,
    #[arg(long)]
    pub n_units: Option<usize>,
    #[arg(long)]
    pub n_periods: Option<usize>,
    /// AR coefficient of the stationary generator.
    #[arg(long, allow_negative_numbers = true)]
    pub ar: Option<f64>,
    /// Cross-unit correlation of the stationary generator.
    #[arg(long, allow_negative_numbers = true)]
    pub correlation: Option<f64>,
    /// Constant treatment effect added to a loaded panel in `simulate`.
    #[arg(long, allow_negative_numbers = true)]
    pub effect: Option<f64>,
    /// Compute the unbiased variance estimate in `fit`.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub variance: Option<bool>,
    /// Also compute the placebo variance.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub placebo: Option<bool>,
    /// Clamp negative variance estimates at zero (breaks unbiasedness).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub truncate_negative: Option<bool>,
    /// Fit every period rather than only the treated one.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub full_period_scope: Option<bool>,
    /// KKT residual the solver must reach.
    #[arg(long)]
    pub tol_kkt: Option<f64>,
    /// Active-set iteration cap.
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub emit: Option<Emit>,
}

macro_rules! overlay {
    ($hi:expr, $lo:expr, $($f:ident),*) => {
        RunConfig { $($f: $hi.$f.or($lo.$f)),* }
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
    }

    /// Fields set in `self` win over `base`.
    pub fn over(self, base: RunConfig) -> RunConfig {
        overlay!(
            self,
            base,
            panel,
            delimiter,
            family,
            families,
            propensity,
            treated_unit,
            treated_units,
            treated_period,
            design,
            nt,
            k_max,
            draws,
            seed,
            generator,
            n_units,
            n_periods,
            ar,
            correlation,
            effect,
            variance,
            placebo,
            truncate_negative,
            full_period_scope,
            tol_kkt,
            max_iter,
            output,
            emit
        )
    }

    /// Range checks on the numeric overrides.
    pub fn check(&self) -> Result<(), String> {
        if let Some(t) = self.tol_kkt {
            if !(t > 0.0 && t <= 1e-2) {
                return Err(format!("tol-kkt must be in (0, 1e-2], got {t}"));
            }
        }
        if let Some(m) = self.max_iter {
            if !(1..=10_000_000).contains(&m) {
                return Err(format!("max-iter must be in 1..=10000000, got {m}"));
            }
        }
        if let Some(k) = self.k_max {
            if !(1..=gsc::multitreat::K_MAX).contains(&k) {
                return Err(format!("k-max must be in 1..={}, got {k}", gsc::multitreat::K_MAX));
            }
        }
        if let Some(d) = self.draws {
            if !(1..=10_000_000).contains(&d) {
                return Err(format!("draws must be in 1..=10000000, got {d}"));
            }
        }
        if let Some(c) = self.delimiter {
            if !c.is_ascii() {
                return Err(format!("delimiter must be a single ASCII character, got {c:?}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let file: RunConfig = toml::from_str("family = \"sc\"\nseed = 4\ntreated-period = \"last\"").unwrap();
        let flags = RunConfig { family: Some("musc".into()), ..Default::default() };
        let cfg = flags.over(file);
        assert_eq!(cfg.family.as_deref(), Some("musc"));
        assert_eq!(cfg.seed, Some(4));
        assert_eq!(cfg.treated_period.as_deref(), Some("last"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("famly = \"sc\"").unwrap_err().to_string();
        assert!(err.contains("famly"), "{err}");
    }

    #[test]
    fn ranges() {
        assert!(RunConfig { tol_kkt: Some(0.5), ..Default::default() }.check().is_err());
        assert!(RunConfig { k_max: Some(0), ..Default::default() }.check().is_err());
        assert!(RunConfig { k_max: Some(100), ..Default::default() }.check().is_ok());
    }
}
