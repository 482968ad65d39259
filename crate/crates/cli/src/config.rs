use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use serde::{Deserialize, Serialize};

use scaledfx::testing::Correction;

use crate::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimand {
    ScaledMean,
    Quantile,
    EffectMod,
    WeightedSummary,
}

impl FromStr for Estimand {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "scaled-mean" => Ok(Estimand::ScaledMean),
            "quantile" => Ok(Estimand::Quantile),
            "effect-mod" => Ok(Estimand::EffectMod),
            "weighted-summary" => Ok(Estimand::WeightedSummary),
            other => Err(format!(
                "unknown estimand `{other}` (expected scaled-mean, quantile, effect-mod or weighted-summary)"
            )),
        }
    }
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimand::ScaledMean => "scaled-mean",
            Estimand::Quantile => "quantile",
            Estimand::EffectMod => "effect-mod",
            Estimand::WeightedSummary => "weighted-summary",
        })
    }
}

fn parse_correction(s: &str) -> Result<Correction, String> {
    s.parse::<Correction>().map_err(|e| e.to_string())
}

/// Flags shared by `estimate` and `test`. Each may also come from a TOML
/// file given with `--config`, using the flag names with `_` for `-`;
/// flags on the command line win.
#[derive(Debug, Clone, Default, Args)]
pub struct AnalysisArgs {
    /// TOML file with any of the keys below
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV file with a header row
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Binary treatment column
    #[arg(long)]
    pub treatment: Option<String>,
    /// Outcome columns, comma separated, in order
    #[arg(long, value_delimiter = ',')]
    pub outcomes: Option<Vec<String>>,
    /// Feature columns for every nuisance model (default: all other columns)
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<String>>,
    /// Propensity features, overriding --features
    #[arg(long, value_delimiter = ',')]
    pub propensity_features: Option<Vec<String>>,
    /// Outcome-mean features, overriding --features
    #[arg(long, value_delimiter = ',')]
    pub mean_features: Option<Vec<String>>,
    /// Second-moment features, overriding --features
    #[arg(long, value_delimiter = ',')]
    pub second_moment_features: Option<Vec<String>>,
    /// Add squares and pairwise products to the second-moment features
    #[arg(long)]
    pub quadratic_eta: bool,
    /// Discrete effect-modifier column
    #[arg(long)]
    pub stratum: Option<String>,
    /// Weights as a CSV file (outcome,stratum,weight) or inline `y1:1=0.5;y2:2=1`
    #[arg(long)]
    pub weights: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Propensity clipping bound
    #[arg(long)]
    pub clip: Option<f64>,
    /// Cross-fitting folds
    #[arg(long)]
    pub folds: Option<usize>,
    /// Bootstrap replicates; replaces the closed-form covariance
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// scaled-mean, quantile, effect-mod or weighted-summary
    #[arg(long)]
    pub estimand: Option<Estimand>,
    /// bonferroni or bh
    #[arg(long, value_parser = parse_correction)]
    pub correction: Option<Correction>,
    /// Standardize stratum effects by the overall control SD
    #[arg(long)]
    pub marginal_sd: bool,
    /// Closed-form instead of bootstrap intervals for quantile effects
    #[arg(long)]
    pub quantile_closed_form: bool,
    /// CDF grid size for quantile effects
    #[arg(long)]
    pub grid_points: Option<usize>,
    /// Path for the JSON report
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    input: Option<PathBuf>,
    treatment: Option<String>,
    outcomes: Option<Vec<String>>,
    features: Option<Vec<String>>,
    propensity_features: Option<Vec<String>>,
    mean_features: Option<Vec<String>>,
    second_moment_features: Option<Vec<String>>,
    quadratic_eta: Option<bool>,
    stratum: Option<String>,
    weights: Option<String>,
    alpha: Option<f64>,
    clip: Option<f64>,
    folds: Option<usize>,
    bootstrap: Option<usize>,
    seed: Option<u64>,
    estimand: Option<Estimand>,
    correction: Option<Correction>,
    marginal_sd: Option<bool>,
    quantile_closed_form: Option<bool>,
    grid_points: Option<usize>,
    output: Option<PathBuf>,
}

/// Resolved analysis settings. Feature lists stay `None` until the input
/// header is known (then they default to every covariate column).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisConfig {
    pub input: PathBuf,
    pub treatment: String,
    pub outcomes: Vec<String>,
    pub propensity_features: Option<Vec<String>>,
    pub mean_features: Option<Vec<String>>,
    pub second_moment_features: Option<Vec<String>>,
    pub quadratic_eta: bool,
    pub stratum: Option<String>,
    pub weights: Option<String>,
    pub alpha: f64,
    pub clip: f64,
    pub folds: Option<usize>,
    pub bootstrap: Option<usize>,
    pub seed: u64,
    pub estimand: Estimand,
    pub correction: Correction,
    pub marginal_sd: bool,
    pub quantile_closed_form: bool,
    pub grid_points: usize,
    pub output: Option<PathBuf>,
}

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_SEED: u64 = 1;
/// Quantile intervals use this many bootstrap replicates unless told otherwise.
pub const DEFAULT_QUANTILE_BOOTSTRAP: usize = 1000;

/// `--features ""` means no features (intercept-only models).
fn drop_empty(list: Vec<String>) -> Vec<String> {
    list.into_iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

fn read_file_config(path: &Path) -> CliResult<FileConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

impl AnalysisArgs {
    pub fn resolve(&self) -> CliResult<AnalysisConfig> {
        let file = match &self.config {
            Some(p) => read_file_config(p)?,
            None => FileConfig::default(),
        };
        let missing = |flag: &str| CliError::Data(format!("--{flag} is required (on the command line or in --config)"));
        let features = self.features.clone().or(file.features).map(drop_empty);
        let config = AnalysisConfig {
            input: self.input.clone().or(file.input).ok_or_else(|| missing("input"))?,
            treatment: self.treatment.clone().or(file.treatment).ok_or_else(|| missing("treatment"))?,
            outcomes: self.outcomes.clone().or(file.outcomes).ok_or_else(|| missing("outcomes"))?,
            propensity_features: self
                .propensity_features
                .clone()
                .or(file.propensity_features)
                .map(drop_empty)
                .or(features.clone()),
            mean_features: self.mean_features.clone().or(file.mean_features).map(drop_empty).or(features.clone()),
            second_moment_features: self
                .second_moment_features
                .clone()
                .or(file.second_moment_features)
                .map(drop_empty)
                .or(features),
            quadratic_eta: self.quadratic_eta || file.quadratic_eta.unwrap_or(false),
            stratum: self.stratum.clone().or(file.stratum),
            weights: self.weights.clone().or(file.weights),
            alpha: self.alpha.or(file.alpha).unwrap_or(DEFAULT_ALPHA),
            clip: self.clip.or(file.clip).unwrap_or(scaledfx::nuisance::DEFAULT_CLIP),
            folds: self.folds.or(file.folds),
            bootstrap: self.bootstrap.or(file.bootstrap),
            seed: self.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
            estimand: self.estimand.or(file.estimand).unwrap_or(Estimand::ScaledMean),
            correction: self.correction.or(file.correction).unwrap_or(Correction::Bonferroni),
            marginal_sd: self.marginal_sd || file.marginal_sd.unwrap_or(false),
            quantile_closed_form: self.quantile_closed_form || file.quantile_closed_form.unwrap_or(false),
            grid_points: self
                .grid_points
                .or(file.grid_points)
                .unwrap_or(scaledfx::nuisance::DEFAULT_GRID_POINTS),
            output: self.output.clone().or(file.output),
        };
        config.check()?;
        Ok(config)
    }
}

impl AnalysisConfig {
    fn check(&self) -> CliResult<()> {
        let bad = |msg: String| Err(CliError::Data(msg));
        if self.outcomes.is_empty() {
            return bad("at least one outcome column is required".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("--alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.clip > 0.0 && self.clip < 0.5) {
            return bad(format!("--clip must lie in (0, 0.5), got {}", self.clip));
        }
        if matches!(self.folds, Some(f) if f < 2) {
            return bad("--folds must be at least 2".into());
        }
        if self.outcomes.contains(&self.treatment) {
            return bad(format!("`{}` is both treatment and outcome", self.treatment));
        }
        for list in [&self.propensity_features, &self.mean_features, &self.second_moment_features]
            .into_iter()
            .flatten()
        {
            for f in list {
                if *f == self.treatment || self.outcomes.contains(f) {
                    return bad(format!("feature `{f}` is the treatment or an outcome"));
                }
            }
        }
        if let Some(v) = &self.stratum {
            if *v == self.treatment || self.outcomes.contains(v) {
                return bad(format!("stratum `{v}` is the treatment or an outcome"));
            }
        }
        Ok(())
    }
}
