//! Shared domain types and the input contract for observational data.

use std::collections::HashSet;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathkit::SymmetricMatrix;

/// Below this, an estimated control-arm variance counts as zero.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

/// Unvalidated observational data: covariates X, binary treatment A, outcomes Y.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub covariates: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    pub treatment: Vec<f64>,
    pub outcomes: DMatrix<f64>,
    pub outcome_names: Vec<String>,
}

/// Column block a violation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Covariates,
    Treatment,
    Outcomes,
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Block::Covariates => "covariate",
            Block::Treatment => "treatment",
            Block::Outcomes => "outcome",
        })
    }
}

/// Rows are reported 1-based.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Shape(String),
    MissingValue { block: Block, row: usize, column: String },
    NonFinite { block: Block, row: usize, column: String },
    NonBinaryTreatment { row: usize, value: f64 },
    EmptyArm { treated: bool },
    DuplicateColumn { block: Block, name: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape(msg) => write!(f, "{msg}"),
            Violation::MissingValue { block, row, column } => {
                write!(f, "missing {block} value at row {row}, column `{column}`")
            }
            Violation::NonFinite { block, row, column } => {
                write!(f, "non-finite {block} value at row {row}, column `{column}`")
            }
            Violation::NonBinaryTreatment { row, value } => {
                write!(f, "non-binary treatment at row {row} (value {value})")
            }
            Violation::EmptyArm { treated: true } => write!(f, "empty treated arm"),
            Violation::EmptyArm { treated: false } => write!(f, "empty control arm"),
            Violation::DuplicateColumn { block, name } => {
                write!(f, "duplicate {block} column name `{name}`")
            }
        }
    }
}

/// Every invariant violation found in a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "  - {v}")?;
        }
        Ok(())
    }
}

/// Validated dataset. Immutable; only obtainable through [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    covariates: DMatrix<f64>,
    covariate_names: Vec<String>,
    treatment: Vec<u8>,
    outcomes: DMatrix<f64>,
    outcome_names: Vec<String>,
}

fn check_block(
    m: &DMatrix<f64>,
    names: &[String],
    block: Block,
    report: &mut Vec<Violation>,
) {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            let v = m[(i, j)];
            let column = names.get(j).cloned().unwrap_or_else(|| format!("#{}", j + 1));
            if v.is_nan() {
                report.push(Violation::MissingValue { block, row: i + 1, column });
            } else if v.is_infinite() {
                report.push(Violation::NonFinite { block, row: i + 1, column });
            }
        }
    }
    let mut seen = HashSet::new();
    for name in names {
        if !seen.insert(name.as_str()) {
            report.push(Violation::DuplicateColumn { block, name: name.clone() });
        }
    }
}

/// Checks every dataset invariant and returns the dataset unchanged, or a
/// report listing each violation with its location.
pub fn validate(raw: RawDataset) -> Result<Dataset, ValidationReport> {
    let mut v = Vec::new();
    let n = raw.treatment.len();
    if n == 0 {
        v.push(Violation::Shape("dataset has no rows".into()));
    }
    if raw.covariates.nrows() != n || raw.outcomes.nrows() != n {
        v.push(Violation::Shape(format!(
            "row counts disagree: {} covariate rows, {} treatment values, {} outcome rows",
            raw.covariates.nrows(),
            n,
            raw.outcomes.nrows()
        )));
    }
    if raw.covariates.ncols() == 0 {
        v.push(Violation::Shape("no covariate columns".into()));
    }
    if raw.outcomes.ncols() == 0 {
        v.push(Violation::Shape("no outcome columns".into()));
    }
    if raw.covariate_names.len() != raw.covariates.ncols() {
        v.push(Violation::Shape(format!(
            "{} covariate names for {} columns",
            raw.covariate_names.len(),
            raw.covariates.ncols()
        )));
    }
    if raw.outcome_names.len() != raw.outcomes.ncols() {
        v.push(Violation::Shape(format!(
            "{} outcome names for {} columns",
            raw.outcome_names.len(),
            raw.outcomes.ncols()
        )));
    }
    check_block(&raw.covariates, &raw.covariate_names, Block::Covariates, &mut v);
    check_block(&raw.outcomes, &raw.outcome_names, Block::Outcomes, &mut v);

    let mut treatment = Vec::with_capacity(n);
    let (mut n0, mut n1) = (0usize, 0usize);
    for (i, &a) in raw.treatment.iter().enumerate() {
        if a.is_nan() {
            v.push(Violation::MissingValue {
                block: Block::Treatment,
                row: i + 1,
                column: "treatment".into(),
            });
        } else if a == 0.0 {
            n0 += 1;
            treatment.push(0);
        } else if a == 1.0 {
            n1 += 1;
            treatment.push(1);
        } else {
            v.push(Violation::NonBinaryTreatment { row: i + 1, value: a });
        }
    }
    if n > 0 && treatment.len() == n {
        if n1 == 0 {
            v.push(Violation::EmptyArm { treated: true });
        }
        if n0 == 0 {
            v.push(Violation::EmptyArm { treated: false });
        }
    }

    if !v.is_empty() {
        return Err(ValidationReport { violations: v });
    }
    Ok(Dataset {
        covariates: raw.covariates,
        covariate_names: raw.covariate_names,
        treatment,
        outcomes: raw.outcomes,
        outcome_names: raw.outcome_names,
    })
}

impl Dataset {
    /// Convenience wrapper around [`validate`] returning the crate error type.
    pub fn new(
        covariates: DMatrix<f64>,
        covariate_names: Vec<String>,
        treatment: Vec<f64>,
        outcomes: DMatrix<f64>,
        outcome_names: Vec<String>,
    ) -> Result<Self> {
        validate(RawDataset {
            covariates,
            covariate_names,
            treatment,
            outcomes,
            outcome_names,
        })
        .map_err(Error::Validation)
    }

    pub fn into_raw(self) -> RawDataset {
        RawDataset {
            covariates: self.covariates,
            covariate_names: self.covariate_names,
            treatment: self.treatment.iter().map(|&a| a as f64).collect(),
            outcomes: self.outcomes,
            outcome_names: self.outcome_names,
        }
    }

    pub fn n(&self) -> usize {
        self.treatment.len()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn k(&self) -> usize {
        self.outcomes.ncols()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    pub fn covariate(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.covariate_index(name)?;
        Ok(self.covariates.column(j).iter().copied().collect())
    }

    /// Treatment indicators, each 0 or 1.
    pub fn treatment(&self) -> &[u8] {
        &self.treatment
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    pub fn outcome_names(&self) -> &[String] {
        &self.outcome_names
    }

    pub fn outcome(&self, k: usize) -> Vec<f64> {
        self.outcomes.column(k).iter().copied().collect()
    }

    pub fn arm_count(&self, arm: u8) -> usize {
        self.treatment.iter().filter(|&&a| a == arm).count()
    }

    /// Builds a new dataset from the given rows (repeats allowed), revalidating.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let covariates = self.covariates.select_rows(rows.iter());
        let outcomes = self.outcomes.select_rows(rows.iter());
        let treatment = rows.iter().map(|&i| self.treatment[i] as f64).collect();
        Dataset::new(
            covariates,
            self.covariate_names.clone(),
            treatment,
            outcomes,
            self.outcome_names.clone(),
        )
    }

    /// Same units with the outcome block replaced.
    pub fn with_outcomes(&self, outcomes: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        Dataset::new(
            self.covariates.clone(),
            self.covariate_names.clone(),
            self.treatment.iter().map(|&a| a as f64).collect(),
            outcomes,
            names,
        )
    }
}

/// Estimated potential-outcome moments per outcome: E(Y^0), E(Y^1), E{(Y^0)^2}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimates {
    pub beta0: Vec<f64>,
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
}

impl MomentEstimates {
    pub fn len(&self) -> usize {
        self.beta0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta0.is_empty()
    }

    pub fn row(&self, k: usize) -> [f64; 3] {
        [self.beta0[k], self.beta1[k], self.beta2[k]]
    }

    /// Control-arm variance beta2 - beta0^2 for outcome k.
    pub fn control_variance(&self, k: usize) -> f64 {
        self.beta2[k] - self.beta0[k] * self.beta0[k]
    }

    /// Scaled effects (beta1 - beta0) / sd, failing on a degenerate variance.
    pub fn scaled_effects(&self, names: &[String]) -> Result<Vec<f64>> {
        (0..self.len())
            .map(|k| {
                let var = self.control_variance(k);
                if !(var >= DEGENERATE_VARIANCE) {
                    let name = names.get(k).cloned().unwrap_or_else(|| format!("outcome {}", k + 1));
                    return Err(Error::DegenerateVariance(name));
                }
                Ok((self.beta1[k] - self.beta0[k]) / var.sqrt())
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfluenceKind {
    ScaledMean,
    Quantile,
    Stratum,
    WeightedSummary,
}

/// Per-unit influence function values, n rows by one column per estimand.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix {
    pub values: DMatrix<f64>,
    pub kind: InfluenceKind,
}

impl InfluenceMatrix {
    pub fn column_means(&self) -> Vec<f64> {
        let n = self.values.nrows() as f64;
        self.values.column_iter().map(|c| c.sum() / n).collect()
    }
}

/// Point estimates with Wald intervals and the influence-function covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectTable {
    pub labels: Vec<String>,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    /// Asymptotic covariance of sqrt(n)(estimate - truth).
    pub covariance: SymmetricMatrix,
    pub alpha: f64,
    pub n: usize,
}

impl EffectTable {
    /// Wald table from estimates and covariance Sigma: SE = sqrt(Sigma_kk / n).
    pub fn wald(
        labels: Vec<String>,
        estimates: Vec<f64>,
        covariance: SymmetricMatrix,
        n: usize,
        alpha: f64,
    ) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        let z = crate::mathkit::normal_quantile(1.0 - alpha / 2.0)?;
        let std_errors: Vec<f64> = covariance
            .diagonal()
            .iter()
            .map(|v| (v.max(0.0) / n as f64).sqrt())
            .collect();
        let ci_lower = estimates.iter().zip(&std_errors).map(|(e, s)| e - z * s).collect();
        let ci_upper = estimates.iter().zip(&std_errors).map(|(e, s)| e + z * s).collect();
        Ok(Self {
            labels,
            estimates,
            std_errors,
            ci_lower,
            ci_upper,
            covariance,
            alpha,
            n,
        })
    }

    pub fn len(&self) -> usize {
        self.estimates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimates.is_empty()
    }
}

/// Per-unit conditional CDF predictions on a threshold grid, one surface per arm.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfSurface {
    grid: Vec<f64>,
    /// n x G per arm; `None` when that arm was not fitted.
    arms: [Option<DMatrix<f64>>; 2],
}

impl CdfSurface {
    /// Sorts nothing: `grid` must be ascending. Each unit's curve is clamped to
    /// [0, 1] and monotonized by a running maximum along the grid.
    pub fn new(grid: Vec<f64>, arm0: Option<DMatrix<f64>>, arm1: Option<DMatrix<f64>>) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::InvalidArgument("empty CDF grid".into()));
        }
        if grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument("CDF grid must be strictly ascending".into()));
        }
        let mut arms = [arm0, arm1];
        for m in arms.iter_mut().flatten() {
            if m.ncols() != grid.len() {
                return Err(Error::InvalidArgument(format!(
                    "CDF surface has {} columns for a grid of {}",
                    m.ncols(),
                    grid.len()
                )));
            }
            monotonize_rows(m);
        }
        Ok(Self { grid, arms })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn arm(&self, a: u8) -> Option<&DMatrix<f64>> {
        self.arms[a as usize].as_ref()
    }
}

/// Clamps each row to [0, 1] and makes it nondecreasing by a running maximum.
pub(crate) fn monotonize_rows(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        let mut running = 0.0_f64;
        for j in 0..m.ncols() {
            let v = m[(i, j)].clamp(0.0, 1.0).max(running);
            running = v;
            m[(i, j)] = v;
        }
    }
}

/// Convergence record for one fitted nuisance model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostic {
    pub target: String,
    pub fold: Option<usize>,
    pub converged: bool,
    pub iterations: usize,
}

/// Per-unit nuisance predictions: propensity pi(1|X_i) clipped to
/// [clip, 1 - clip], arm-specific outcome means mu_k(X_i, a), control-arm
/// second moments eta_k(X_i, 0), and optional CDF surfaces nu_k(y|X_i, a).
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceFits {
    propensity: Vec<f64>,
    outcome_mean: [DMatrix<f64>; 2],
    second_moment: DMatrix<f64>,
    cdf: Vec<Option<CdfSurface>>,
    clip: f64,
    pub diagnostics: Vec<FitDiagnostic>,
}

impl NuisanceFits {
    pub fn new(
        propensity: Vec<f64>,
        mean_control: DMatrix<f64>,
        mean_treated: DMatrix<f64>,
        second_moment: DMatrix<f64>,
        clip: f64,
    ) -> Result<Self> {
        if !(clip > 0.0 && clip < 0.5) {
            return Err(Error::InvalidArgument(format!("clip bound must lie in (0, 0.5), got {clip}")));
        }
        let n = propensity.len();
        let k = second_moment.ncols();
        for (name, m) in [("control mean", &mean_control), ("treated mean", &mean_treated), ("second moment", &second_moment)] {
            if m.nrows() != n || m.ncols() != k {
                return Err(Error::InvalidArgument(format!(
                    "{name} predictions are {}x{}, expected {n}x{k}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("non-finite {name} prediction")));
            }
        }
        if propensity.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("non-finite propensity prediction".into()));
        }
        let propensity = propensity.into_iter().map(|p| p.clamp(clip, 1.0 - clip)).collect();
        Ok(Self {
            propensity,
            outcome_mean: [mean_control, mean_treated],
            second_moment,
            cdf: vec![None; k],
            clip,
            diagnostics: Vec::new(),
        })
    }

    pub fn with_cdf(mut self, k: usize, surface: CdfSurface) -> Result<Self> {
        if k >= self.cdf.len() {
            return Err(Error::InvalidArgument(format!("no outcome {k} for CDF surface")));
        }
        for m in surface.arms.iter().flatten() {
            if m.nrows() != self.n() {
                return Err(Error::InvalidArgument("CDF surface row count mismatch".into()));
            }
        }
        self.cdf[k] = Some(surface);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.propensity.len()
    }

    pub fn k(&self) -> usize {
        self.second_moment.ncols()
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    /// Clipped pi(1 | X_i).
    pub fn propensity(&self) -> &[f64] {
        &self.propensity
    }

    /// pi(a | X_i).
    pub fn arm_probability(&self, i: usize, a: u8) -> f64 {
        if a == 1 {
            self.propensity[i]
        } else {
            1.0 - self.propensity[i]
        }
    }

    /// n x K matrix of mu_k(X_i, a).
    pub fn outcome_mean(&self, a: u8) -> &DMatrix<f64> {
        &self.outcome_mean[a as usize]
    }

    /// n x K matrix of eta_k(X_i, 0).
    pub fn second_moment(&self) -> &DMatrix<f64> {
        &self.second_moment
    }

    pub fn cdf(&self, k: usize) -> Option<&CdfSurface> {
        self.cdf.get(k).and_then(|c| c.as_ref())
    }
}
