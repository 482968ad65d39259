//! Nuisance models: propensity pi(a|x), outcome means mu_k(x, a), control-arm
//! second moments eta_k(x, 0) and conditional CDFs nu_k(y | x, a).
//!
//! Models are parametric (linear or logistic on named covariate columns),
//! optionally cross-fitted, or replaced wholesale by a plug-in oracle.

mod cdf;
mod linear;
mod logistic;

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use cdf::{quantile_grid, DEFAULT_GRID_POINTS};
pub use linear::{fit_linear, FitResult, RIDGE_PENALTY};
pub use logistic::{expit, fit_logistic, predict_probability, MAX_ITERATIONS, SCORE_TOLERANCE};

use crate::error::{Error, Result};
use crate::model::{CdfSurface, Dataset, FitDiagnostic, NuisanceFits};

pub const DEFAULT_CLIP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Propensity,
    OutcomeMean(usize),
    SecondMoment(usize),
    Cdf(usize),
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Propensity => write!(f, "propensity"),
            Target::OutcomeMean(k) => write!(f, "outcome-mean {}", k + 1),
            Target::SecondMoment(k) => write!(f, "second-moment {}", k + 1),
            Target::Cdf(k) => write!(f, "cdf {}", k + 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Linear,
    Logistic,
}

/// Which nuisance to fit, on which covariate columns, with which family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub target: Target,
    pub feature_columns: Vec<String>,
    pub family: Family,
}

impl ModelSpec {
    /// Spec with the default family for the target: logistic for the
    /// propensity and CDFs, linear for means and second moments.
    pub fn new(target: Target, feature_columns: Vec<String>) -> Self {
        let family = match target {
            Target::Propensity | Target::Cdf(_) => Family::Logistic,
            Target::OutcomeMean(_) | Target::SecondMoment(_) => Family::Linear,
        };
        Self { target, feature_columns, family }
    }
}

/// Full spec set with the same feature lists for every outcome.
pub fn standard_specs(
    k: usize,
    propensity: &[String],
    mean: &[String],
    second_moment: &[String],
    cdf: Option<&[String]>,
) -> Vec<ModelSpec> {
    let mut specs = vec![ModelSpec::new(Target::Propensity, propensity.to_vec())];
    for j in 0..k {
        specs.push(ModelSpec::new(Target::OutcomeMean(j), mean.to_vec()));
        specs.push(ModelSpec::new(Target::SecondMoment(j), second_moment.to_vec()));
        if let Some(c) = cdf {
            specs.push(ModelSpec::new(Target::Cdf(j), c.to_vec()));
        }
    }
    specs
}

/// Threshold grid for CDF surfaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CdfGrid {
    /// This many empirical quantiles of the pooled outcome.
    PooledQuantiles(usize),
    /// The same explicit ascending grid for every outcome.
    Explicit(Vec<f64>),
}

impl Default for CdfGrid {
    fn default() -> Self {
        CdfGrid::PooledQuantiles(DEFAULT_GRID_POINTS)
    }
}

impl CdfGrid {
    pub fn resolve(&self, outcome: &[f64]) -> Result<Vec<f64>> {
        match self {
            CdfGrid::PooledQuantiles(points) => quantile_grid(outcome, *points),
            CdfGrid::Explicit(g) => {
                if g.is_empty() || g.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::InvalidArgument("CDF grid must be nonempty and ascending".into()));
                }
                Ok(g.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub clip: f64,
    /// Cross-fitting folds; unit i belongs to fold i mod folds.
    pub folds: Option<usize>,
    pub cdf_grid: CdfGrid,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { clip: DEFAULT_CLIP, folds: None, cdf_grid: CdfGrid::default() }
    }
}

/// Known nuisance functions evaluated at a full covariate row.
pub trait NuisanceOracle: Sync {
    /// pi(1 | x).
    fn propensity(&self, x: &[f64]) -> f64;
    /// mu_k(x, a).
    fn outcome_mean(&self, x: &[f64], a: u8, k: usize) -> f64;
    /// eta_k(x, 0) = E(Y_k^2 | x, A = 0).
    fn second_moment(&self, x: &[f64], k: usize) -> f64;
    /// nu_k(y | x, a), when known.
    fn cdf(&self, _y: f64, _x: &[f64], _a: u8, _k: usize) -> Option<f64> {
        None
    }
}

struct Resolved<'a> {
    spec: &'a ModelSpec,
    columns: Vec<usize>,
}

fn resolve<'a>(dataset: &Dataset, specs: &'a [ModelSpec], target: Target) -> Result<Option<Resolved<'a>>> {
    let Some(spec) = specs.iter().find(|s| s.target == target) else {
        return Ok(None);
    };
    let columns = spec
        .feature_columns
        .iter()
        .map(|c| dataset.covariate_index(c))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(Resolved { spec, columns }))
}

fn require<'a>(dataset: &Dataset, specs: &'a [ModelSpec], target: Target) -> Result<Resolved<'a>> {
    resolve(dataset, specs, target)?.ok_or_else(|| Error::MissingSpec(target.to_string()))
}

fn design(dataset: &Dataset, columns: &[usize], rows: &[usize]) -> DMatrix<f64> {
    let x = dataset.covariates();
    DMatrix::from_fn(rows.len(), columns.len(), |i, j| x[(rows[i], columns[j])])
}

/// Replaces generic "column j" names from the fitters with covariate names.
fn name_columns(err: Error, dataset: &Dataset, r: &Resolved<'_>) -> Error {
    match err {
        Error::RankDeficient(cols) => Error::RankDeficient(
            cols.into_iter()
                .map(|c| {
                    c.strip_prefix("column ")
                        .and_then(|j| j.parse::<usize>().ok())
                        .and_then(|j| r.columns.get(j - 1))
                        .map(|&idx| format!("{} ({})", dataset.covariate_names()[idx], r.spec.target))
                        .unwrap_or(format!("{c} ({})", r.spec.target))
                })
                .collect(),
        ),
        other => other,
    }
}

/// Fits on `train` rows and predicts on `predict` rows.
fn fit_predict(
    dataset: &Dataset,
    r: &Resolved<'_>,
    response: &[f64],
    train: &[usize],
    predict: &[usize],
    fold: Option<usize>,
    diagnostics: &mut Vec<FitDiagnostic>,
) -> Result<Vec<f64>> {
    let x_train = design(dataset, &r.columns, train);
    let y: Vec<f64> = train.iter().map(|&i| response[i]).collect();
    let x_pred = design(dataset, &r.columns, predict);
    let fit = match r.spec.family {
        Family::Linear => fit_linear(&x_train, &y, None),
        Family::Logistic => fit_logistic(&x_train, &y),
    }
    .map_err(|e| name_columns(e, dataset, r))?;
    diagnostics.push(FitDiagnostic {
        target: r.spec.target.to_string(),
        fold,
        converged: fit.converged,
        iterations: fit.iterations,
    });
    Ok(match r.spec.family {
        Family::Linear => fit.linear_predictor(&x_pred),
        Family::Logistic => predict_probability(&fit, &x_pred),
    })
}

/// (train, predict) row sets: everything/everything, or one pair per fold.
fn splits(dataset: &Dataset, folds: Option<usize>) -> Result<Vec<(Option<usize>, Vec<usize>, Vec<usize>)>> {
    let n = dataset.n();
    let all: Vec<usize> = (0..n).collect();
    let Some(f) = folds else {
        return Ok(vec![(None, all.clone(), all)]);
    };
    if f < 2 || f > n {
        return Err(Error::InvalidArgument(format!("cross-fitting needs 2 <= folds <= n, got {f}")));
    }
    let a = dataset.treatment();
    (0..f)
        .map(|fold| {
            let train: Vec<usize> = all.iter().copied().filter(|i| i % f != fold).collect();
            let predict: Vec<usize> = all.iter().copied().filter(|i| i % f == fold).collect();
            for arm in [0u8, 1] {
                if !train.iter().any(|&i| a[i] == arm) {
                    return Err(Error::EmptyArm(format!(
                        "training set for fold {} has no {} units",
                        fold + 1,
                        if arm == 1 { "treated" } else { "control" }
                    )));
                }
            }
            Ok((Some(fold), train, predict))
        })
        .collect()
}

/// Fits every nuisance named in `specs` and predicts it for all units.
///
/// Requires a propensity spec and, for every outcome, an outcome-mean and a
/// second-moment spec; CDF specs are optional and produce CDF surfaces for
/// both arms. Means are fitted separately within each arm, second moments
/// (of Y_k^2) within the control arm. With `folds`, each unit's predictions
/// come from models fitted on the other folds.
pub fn fit_nuisances(dataset: &Dataset, specs: &[ModelSpec], options: &FitOptions) -> Result<NuisanceFits> {
    let n = dataset.n();
    let k = dataset.k();
    let a = dataset.treatment();
    let prop_spec = require(dataset, specs, Target::Propensity)?;
    let mean_specs = (0..k)
        .map(|j| require(dataset, specs, Target::OutcomeMean(j)))
        .collect::<Result<Vec<_>>>()?;
    let eta_specs = (0..k)
        .map(|j| require(dataset, specs, Target::SecondMoment(j)))
        .collect::<Result<Vec<_>>>()?;
    let cdf_specs = (0..k)
        .map(|j| resolve(dataset, specs, Target::Cdf(j)))
        .collect::<Result<Vec<_>>>()?;
    let grids = cdf_specs
        .iter()
        .enumerate()
        .map(|(j, s)| s.as_ref().map(|_| options.cdf_grid.resolve(&dataset.outcome(j))).transpose())
        .collect::<Result<Vec<_>>>()?;

    let mut diagnostics = Vec::new();
    let mut propensity = vec![0.0; n];
    let mut means = [DMatrix::zeros(n, k), DMatrix::zeros(n, k)];
    let mut eta = DMatrix::zeros(n, k);
    let mut cdf: Vec<[DMatrix<f64>; 2]> = grids
        .iter()
        .map(|g| {
            let len = g.as_ref().map_or(0, |g| g.len());
            [DMatrix::zeros(n, len), DMatrix::zeros(n, len)]
        })
        .collect();

    let treat: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    for (fold, train, predict) in splits(dataset, options.folds)? {
        let pi = fit_predict(dataset, &prop_spec, &treat, &train, &predict, fold, &mut diagnostics)?;
        for (&i, p) in predict.iter().zip(pi) {
            propensity[i] = p;
        }
        let arm_rows = |arm: u8| -> Vec<usize> { train.iter().copied().filter(|&i| a[i] == arm).collect() };
        let rows = [arm_rows(0), arm_rows(1)];
        for j in 0..k {
            let y = dataset.outcome(j);
            for arm in [0u8, 1] {
                let mu = fit_predict(dataset, &mean_specs[j], &y, &rows[arm as usize], &predict, fold, &mut diagnostics)?;
                for (&i, v) in predict.iter().zip(mu) {
                    means[arm as usize][(i, j)] = v;
                }
            }
            let y2: Vec<f64> = y.iter().map(|v| v * v).collect();
            let e = fit_predict(dataset, &eta_specs[j], &y2, &rows[0], &predict, fold, &mut diagnostics)?;
            for (&i, v) in predict.iter().zip(e) {
                eta[(i, j)] = v;
            }
            if let (Some(spec), Some(grid)) = (&cdf_specs[j], &grids[j]) {
                let x_pred = design(dataset, &spec.columns, &predict);
                for arm in [0u8, 1] {
                    let train_rows = &rows[arm as usize];
                    let x_train = design(dataset, &spec.columns, train_rows);
                    let y_train: Vec<f64> = train_rows.iter().map(|&i| y[i]).collect();
                    let label = format!("{} arm {arm}", spec.spec.target);
                    let block = cdf::fit_cdf_rows(&x_train, &y_train, &x_pred, grid, &mut diagnostics, &label, fold)
                        .map_err(|e| name_columns(e, dataset, spec))?;
                    for (r, &i) in predict.iter().enumerate() {
                        for g in 0..grid.len() {
                            cdf[j][arm as usize][(i, g)] = block[(r, g)];
                        }
                    }
                }
            }
        }
    }

    let [m0, m1] = means;
    let mut fits = NuisanceFits::new(propensity, m0, m1, eta, options.clip)?;
    for (j, (surfaces, grid)) in cdf.into_iter().zip(grids).enumerate() {
        if let Some(grid) = grid {
            let [c0, c1] = surfaces;
            fits = fits.with_cdf(j, CdfSurface::new(grid, Some(c0), Some(c1))?)?;
        }
    }
    fits.diagnostics = diagnostics;
    Ok(fits)
}

/// CDF surface for one outcome and arm: fitted within arm `arm` on all its
/// units, predicted for every unit, monotonized along the grid.
pub fn fit_cdf_surface(dataset: &Dataset, outcome: usize, grid: &[f64], arm: u8, spec: &ModelSpec) -> Result<DMatrix<f64>> {
    if grid.is_empty() || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument("CDF grid must be nonempty and ascending".into()));
    }
    let columns = spec
        .feature_columns
        .iter()
        .map(|c| dataset.covariate_index(c))
        .collect::<Result<Vec<_>>>()?;
    let y = dataset.outcome(outcome);
    let rows: Vec<usize> = (0..dataset.n()).filter(|&i| dataset.treatment()[i] == arm).collect();
    let all: Vec<usize> = (0..dataset.n()).collect();
    let x_train = design(dataset, &columns, &rows);
    let y_train: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
    let mut diagnostics = Vec::new();
    cdf::fit_cdf_rows(&x_train, &y_train, &design(dataset, &columns, &all), grid, &mut diagnostics, "cdf", None)
}

/// Builds nuisance predictions directly from known functions, skipping all
/// fitting. CDF surfaces are filled for every outcome the oracle answers.
pub fn oracle_nuisances(
    dataset: &Dataset,
    oracle: &dyn NuisanceOracle,
    clip: f64,
    cdf_grid: Option<&CdfGrid>,
) -> Result<NuisanceFits> {
    let n = dataset.n();
    let k = dataset.k();
    let x = dataset.covariates();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).iter().copied().collect()).collect();
    let propensity = rows.iter().map(|r| oracle.propensity(r)).collect();
    let m0 = DMatrix::from_fn(n, k, |i, j| oracle.outcome_mean(&rows[i], 0, j));
    let m1 = DMatrix::from_fn(n, k, |i, j| oracle.outcome_mean(&rows[i], 1, j));
    let eta = DMatrix::from_fn(n, k, |i, j| oracle.second_moment(&rows[i], j));
    let mut fits = NuisanceFits::new(propensity, m0, m1, eta, clip)?;
    if let Some(grid_spec) = cdf_grid {
        for j in 0..k {
            let grid = grid_spec.resolve(&dataset.outcome(j))?;
            if oracle.cdf(grid[0], &rows[0], 0, j).is_none() {
                continue;
            }
            let mut arms = [DMatrix::zeros(n, grid.len()), DMatrix::zeros(n, grid.len())];
            for (arm, m) in arms.iter_mut().enumerate() {
                for i in 0..n {
                    for (g, &y) in grid.iter().enumerate() {
                        m[(i, g)] = oracle.cdf(y, &rows[i], arm as u8, j).unwrap_or(0.0);
                    }
                }
            }
            let [c0, c1] = arms;
            fits = fits.with_cdf(j, CdfSurface::new(grid, Some(c0), Some(c1))?)?;
        }
    }
    Ok(fits)
}

/// How nuisances are obtained for a dataset: fitted from specs or taken
/// from known functions. Bootstrap replicates refit through this.
#[derive(Clone)]
pub enum NuisanceSource {
    Fitted { specs: Vec<ModelSpec>, options: FitOptions },
    Oracle { oracle: Arc<dyn NuisanceOracle + Send>, clip: f64, cdf_grid: Option<CdfGrid> },
}

impl fmt::Debug for NuisanceSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NuisanceSource::Fitted { specs, options } => {
                f.debug_struct("Fitted").field("specs", specs).field("options", options).finish()
            }
            NuisanceSource::Oracle { clip, cdf_grid, .. } => {
                f.debug_struct("Oracle").field("clip", clip).field("cdf_grid", cdf_grid).finish()
            }
        }
    }
}

impl NuisanceSource {
    pub fn fit(&self, dataset: &Dataset) -> Result<NuisanceFits> {
        match self {
            NuisanceSource::Fitted { specs, options } => fit_nuisances(dataset, specs, options),
            NuisanceSource::Oracle { oracle, clip, cdf_grid } => {
                oracle_nuisances(dataset, oracle.as_ref(), *clip, cdf_grid.as_ref())
            }
        }
    }

    /// The same source for a dataset reduced to outcome `k` alone.
    pub fn for_outcome(&self, k: usize) -> NuisanceSource {
        match self {
            NuisanceSource::Fitted { specs, options } => NuisanceSource::Fitted {
                specs: specs
                    .iter()
                    .filter_map(|s| {
                        let target = match s.target {
                            Target::Propensity => Target::Propensity,
                            Target::OutcomeMean(j) if j == k => Target::OutcomeMean(0),
                            Target::SecondMoment(j) if j == k => Target::SecondMoment(0),
                            Target::Cdf(j) if j == k => Target::Cdf(0),
                            _ => return None,
                        };
                        Some(ModelSpec { target, ..s.clone() })
                    })
                    .collect(),
                options: options.clone(),
            },
            NuisanceSource::Oracle { oracle, clip, cdf_grid } => NuisanceSource::Oracle {
                oracle: Arc::new(SingleOutcome { inner: oracle.clone(), k }),
                clip: *clip,
                cdf_grid: cdf_grid.clone(),
            },
        }
    }
}

struct SingleOutcome {
    inner: Arc<dyn NuisanceOracle + Send>,
    k: usize,
}

impl NuisanceOracle for SingleOutcome {
    fn propensity(&self, x: &[f64]) -> f64 {
        self.inner.propensity(x)
    }
    fn outcome_mean(&self, x: &[f64], a: u8, _k: usize) -> f64 {
        self.inner.outcome_mean(x, a, self.k)
    }
    fn second_moment(&self, x: &[f64], _k: usize) -> f64 {
        self.inner.second_moment(x, self.k)
    }
    fn cdf(&self, y: f64, x: &[f64], a: u8, _k: usize) -> Option<f64> {
        self.inner.cdf(y, x, a, self.k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let n = 12;
        let x = DMatrix::from_fn(n, 1, |i, _| (i as f64 * 0.37).sin());
        let a: Vec<f64> = (0..n).map(|i| (i % 3 != 0) as u8 as f64).collect();
        let y = DMatrix::from_fn(n, 1, |i, _| 1.0 + x[(i, 0)] + 0.1 * (i as f64).cos() + a[i]);
        Dataset::new(x, vec!["x".into()], a, y, vec!["y".into()]).unwrap()
    }

    #[test]
    fn missing_spec_is_reported() {
        let d = toy();
        let specs = vec![ModelSpec::new(Target::Propensity, vec!["x".into()])];
        let err = fit_nuisances(&d, &specs, &FitOptions::default()).unwrap_err();
        assert!(matches!(err, Error::MissingSpec(ref t) if t == "outcome-mean 1"));
    }

    #[test]
    fn unknown_column_is_reported() {
        let d = toy();
        let specs = standard_specs(1, &["z".into()], &[], &[], None);
        assert!(matches!(fit_nuisances(&d, &specs, &FitOptions::default()), Err(Error::UnknownColumn(_))));
    }

    #[test]
    fn clip_applies_to_fitted_propensity() {
        let fits = NuisanceFits::new(
            vec![0.002, 0.5, 0.999],
            DMatrix::zeros(3, 1),
            DMatrix::zeros(3, 1),
            DMatrix::zeros(3, 1),
            0.01,
        )
        .unwrap();
        assert_eq!(fits.propensity(), &[0.01, 0.5, 0.99]);
    }

    #[test]
    fn cross_fit_with_empty_training_arm_fails() {
        // two treated units, both in fold 0 of 2 -> fold 0's training set has none
        let n = 6;
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64);
        let a = vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let y = DMatrix::from_fn(n, 1, |i, _| i as f64 * 0.5);
        let d = Dataset::new(x, vec!["x".into()], a, y, vec!["y".into()]).unwrap();
        let specs = standard_specs(1, &[], &[], &[], None);
        let opts = FitOptions { folds: Some(2), ..FitOptions::default() };
        assert!(matches!(fit_nuisances(&d, &specs, &opts), Err(Error::EmptyArm(_))));
    }

    #[test]
    fn family_defaults() {
        assert_eq!(ModelSpec::new(Target::Propensity, vec![]).family, Family::Logistic);
        assert_eq!(ModelSpec::new(Target::Cdf(0), vec![]).family, Family::Logistic);
        assert_eq!(ModelSpec::new(Target::OutcomeMean(0), vec![]).family, Family::Linear);
        assert_eq!(ModelSpec::new(Target::SecondMoment(2), vec![]).family, Family::Linear);
    }
}
