use std::path::PathBuf;

use clap::Args;
use nalgebra::DMatrix;

use scaledfx::estimate::{
    bootstrap_covariance, bootstrap_scaled_covariance, estimate_effect_modification, estimate_quantile_effect,
    estimate_scaled_effects, estimate_weighted_summary, QuantileInference, WeightFunction,
};
use scaledfx::model::{Dataset, EffectTable, NuisanceFits};
use scaledfx::nuisance::{fit_nuisances, CdfGrid, FitOptions, ModelSpec, NuisanceSource};
use scaledfx::sim::{quadratic_expansion, quadratic_names, run_replications, Correct, SimScenario};
use scaledfx::testing::{homogeneity_test, pairwise_tests, CovarianceSource};

use crate::config::{AnalysisConfig, Estimand, DEFAULT_QUANTILE_BOOTSTRAP};
use crate::io::{read_csv, read_weights};
use crate::report::{CovarianceBlock, Diagnostics, EstimateRow, Report, TestsBlock};
use crate::{CliError, CliResult};

/// Data and nuisance specs ready for fitting, with the feature lists filled in.
struct Prepared {
    config: AnalysisConfig,
    dataset: Dataset,
    specs: Vec<ModelSpec>,
    options: FitOptions,
}

impl Prepared {
    fn source(&self) -> NuisanceSource {
        NuisanceSource::Fitted { specs: self.specs.clone(), options: self.options.clone() }
    }

    fn diagnostics(&self, fits: &NuisanceFits) -> Diagnostics {
        Diagnostics {
            n: Some(self.dataset.n()),
            n_treated: Some(self.dataset.arm_count(1)),
            n_control: Some(self.dataset.arm_count(0)),
            clip: Some(self.config.clip),
            folds: self.config.folds,
            nonconverged_fits: fits.diagnostics.iter().filter(|d| !d.converged).cloned().collect(),
            ..Diagnostics::default()
        }
    }

    fn report(&self, command: &str, diagnostics: Diagnostics) -> Report {
        Report {
            command: command.into(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            estimand: None,
            estimates: None,
            covariance: None,
            tests: None,
            simulation: None,
            diagnostics,
        }
    }
}

fn check_columns(dataset: &Dataset, columns: &[String], what: &str) -> CliResult<()> {
    for c in columns {
        if !dataset.covariate_names().contains(c) {
            return Err(CliError::Data(format!("{what} column `{c}` is not a covariate of the input")));
        }
    }
    Ok(())
}

/// Appends squares and pairwise products of `base` as new covariates and
/// returns the dataset with the expanded feature names.
fn add_quadratic(dataset: Dataset, base: &[String]) -> CliResult<(Dataset, Vec<String>)> {
    let idx: Vec<usize> = base.iter().map(|c| dataset.covariate_index(c)).collect::<Result<_, _>>()?;
    let x = dataset.covariates();
    let m = DMatrix::from_fn(dataset.n(), idx.len(), |i, j| x[(i, idx[j])]);
    let expanded = quadratic_expansion(&m);
    let names = quadratic_names(base);
    let mut raw = dataset.into_raw();
    let mut columns: Vec<Vec<f64>> = raw.covariates.column_iter().map(|c| c.iter().copied().collect()).collect();
    for (j, name) in names.iter().enumerate().skip(base.len()) {
        if raw.covariate_names.contains(name) {
            return Err(CliError::Data(format!("quadratic term `{name}` collides with an input column")));
        }
        raw.covariate_names.push(name.clone());
        columns.push(expanded.column(j).iter().copied().collect());
    }
    let n = raw.treatment.len();
    let covariates = DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i]);
    let ds = Dataset::new(covariates, raw.covariate_names, raw.treatment, raw.outcomes, raw.outcome_names)?;
    Ok((ds, names))
}

fn prepare(config: &AnalysisConfig) -> CliResult<Prepared> {
    let mut config = config.clone();
    let dataset = read_csv(&config.input, &config.treatment, &config.outcomes)?;
    let all = dataset.covariate_names().to_vec();
    let propensity = config.propensity_features.clone().unwrap_or_else(|| all.clone());
    let mean = config.mean_features.clone().unwrap_or_else(|| all.clone());
    let mut eta = config.second_moment_features.clone().unwrap_or_else(|| all.clone());
    check_columns(&dataset, &propensity, "propensity feature")?;
    check_columns(&dataset, &mean, "mean feature")?;
    check_columns(&dataset, &eta, "second-moment feature")?;
    if let Some(v) = &config.stratum {
        check_columns(&dataset, std::slice::from_ref(v), "stratum")?;
    }
    config.propensity_features = Some(propensity.clone());
    config.mean_features = Some(mean.clone());
    config.second_moment_features = Some(eta.clone());
    let dataset = if config.quadratic_eta {
        let (ds, expanded) = add_quadratic(dataset, &eta)?;
        eta = expanded;
        ds
    } else {
        dataset
    };
    let cdf = (config.estimand == Estimand::Quantile).then_some(mean.as_slice());
    let specs = scaledfx::nuisance::standard_specs(dataset.k(), &propensity, &mean, &eta, cdf);
    let options = FitOptions {
        clip: config.clip,
        folds: config.folds,
        cdf_grid: CdfGrid::PooledQuantiles(config.grid_points),
    };
    Ok(Prepared { config, dataset, specs, options })
}

fn rows_from_table(table: &EffectTable) -> Vec<EstimateRow> {
    (0..table.len())
        .map(|i| EstimateRow {
            label: table.labels[i].clone(),
            estimate: table.estimates[i],
            std_error: Some(table.std_errors[i]),
            ci_lower: Some(table.ci_lower[i]),
            ci_upper: Some(table.ci_upper[i]),
            quantiles: None,
        })
        .collect()
}

fn covariance_block(table: &EffectTable, source: CovarianceSource) -> CovarianceBlock {
    CovarianceBlock { source, labels: table.labels.clone(), matrix: table.covariance.to_rows() }
}

/// Replaces the table's covariance by a bootstrap one when B is configured.
fn maybe_bootstrap<F>(
    prepared: &Prepared,
    table: EffectTable,
    diagnostics: &mut Diagnostics,
    estimator: F,
) -> CliResult<(EffectTable, CovarianceSource)>
where
    F: Fn(&Dataset) -> scaledfx::Result<Vec<f64>> + Sync,
{
    let Some(b) = prepared.config.bootstrap else {
        return Ok((table, CovarianceSource::ClosedForm));
    };
    let boot = bootstrap_covariance(&prepared.dataset, estimator, b, prepared.config.seed)?;
    diagnostics.bootstrap_replicates = Some(b);
    diagnostics.bootstrap_failed = Some(boot.failed);
    let table = EffectTable::wald(table.labels, table.estimates, boot.covariance, table.n, table.alpha)?;
    Ok((table, CovarianceSource::Bootstrap))
}

fn scaled_mean(prepared: &Prepared, fits: &NuisanceFits, diagnostics: &mut Diagnostics) -> CliResult<(EffectTable, CovarianceSource)> {
    let effects = estimate_scaled_effects(&prepared.dataset, fits, prepared.config.alpha)?;
    let Some(b) = prepared.config.bootstrap else {
        return Ok((effects.table, CovarianceSource::ClosedForm));
    };
    let boot = bootstrap_scaled_covariance(&prepared.dataset, &prepared.source(), b, prepared.config.seed)?;
    diagnostics.bootstrap_replicates = Some(b);
    diagnostics.bootstrap_failed = Some(boot.failed);
    let t = effects.table;
    Ok((EffectTable::wald(t.labels, t.estimates, boot.covariance, t.n, t.alpha)?, CovarianceSource::Bootstrap))
}

fn require_stratum(config: &AnalysisConfig) -> CliResult<String> {
    config
        .stratum
        .clone()
        .ok_or_else(|| CliError::Data(format!("--estimand {} needs --stratum", config.estimand)))
}

fn weight_function(config: &AnalysisConfig, dataset: &Dataset) -> CliResult<WeightFunction> {
    let spec = config
        .weights
        .as_deref()
        .ok_or_else(|| CliError::Data("--estimand weighted-summary needs --weights".into()))?;
    let mut entries = Vec::new();
    for (outcome, v, w) in read_weights(spec)? {
        let k = dataset
            .outcome_names()
            .iter()
            .position(|o| *o == outcome)
            .ok_or_else(|| CliError::Data(format!("weights name unknown outcome `{outcome}`")))?;
        entries.push((k, v, w));
    }
    // pairs absent from the table weigh 0
    Ok(WeightFunction::from_entries(entries, 0.0).map_err(|e| CliError::Data(e.to_string()))?)
}

/// `estimate`: the configured estimand with intervals and covariance.
pub fn cmd_estimate(config: &AnalysisConfig) -> CliResult<Report> {
    let prepared = prepare(config)?;
    let fits = fit_nuisances(&prepared.dataset, &prepared.specs, &prepared.options)?;
    let mut diagnostics = prepared.diagnostics(&fits);
    let cfg = &prepared.config;
    let (estimates, covariance) = match cfg.estimand {
        Estimand::ScaledMean => {
            let (table, source) = scaled_mean(&prepared, &fits, &mut diagnostics)?;
            (rows_from_table(&table), Some(covariance_block(&table, source)))
        }
        Estimand::Quantile => {
            let inference = if cfg.quantile_closed_form {
                QuantileInference::ClosedForm
            } else {
                let replicates = cfg.bootstrap.unwrap_or(DEFAULT_QUANTILE_BOOTSTRAP);
                diagnostics.bootstrap_replicates = Some(replicates);
                QuantileInference::Bootstrap { replicates, seed: cfg.seed, source: prepared.source() }
            };
            let mut rows = Vec::new();
            for k in 0..prepared.dataset.k() {
                let q = estimate_quantile_effect(&prepared.dataset, &fits, k, cfg.alpha, &inference)?;
                rows.push(EstimateRow {
                    label: q.outcome,
                    estimate: q.estimate,
                    std_error: q.std_error,
                    ci_lower: q.ci_lower,
                    ci_upper: q.ci_upper,
                    quantiles: Some(q.quantiles),
                });
            }
            // outcomes are analysed one at a time, so only variances are known
            let variances: Vec<f64> = rows
                .iter()
                .map(|r| r.std_error.map_or(f64::NAN, |s| s * s * prepared.dataset.n() as f64))
                .collect();
            let source = if cfg.quantile_closed_form { CovarianceSource::ClosedForm } else { CovarianceSource::Bootstrap };
            let labels = rows.iter().map(|r| r.label.clone()).collect();
            let matrix = (0..rows.len())
                .map(|i| (0..rows.len()).map(|j| if i == j { variances[i] } else { f64::NAN }).collect())
                .collect();
            (rows, Some(CovarianceBlock { source, labels, matrix }))
        }
        Estimand::EffectMod => {
            let column = require_stratum(cfg)?;
            let m = estimate_effect_modification(&prepared.dataset, &fits, &column, cfg.alpha, cfg.marginal_sd)?;
            let source = prepared.source();
            let strata = m.strata.clone();
            let (table, cov_source) = maybe_bootstrap(&prepared, m.table, &mut diagnostics, |d| {
                let r = estimate_effect_modification(d, &source.fit(d)?, &column, cfg.alpha, cfg.marginal_sd)?;
                if r.strata != strata {
                    return Err(scaledfx::Error::EmptyStratum(format!("{column} lost a stratum in a resample")));
                }
                Ok(r.table.estimates)
            })?;
            (rows_from_table(&table), Some(covariance_block(&table, cov_source)))
        }
        Estimand::WeightedSummary => {
            let column = require_stratum(cfg)?;
            let weights = weight_function(cfg, &prepared.dataset)?;
            let s = estimate_weighted_summary(&prepared.dataset, &fits, &column, &weights, cfg.alpha)?;
            let source = prepared.source();
            let (table, cov_source) = maybe_bootstrap(&prepared, s.table, &mut diagnostics, |d| {
                let r = estimate_weighted_summary(d, &source.fit(d)?, &column, &weights, cfg.alpha)?;
                Ok(r.table.estimates)
            })?;
            (rows_from_table(&table), Some(covariance_block(&table, cov_source)))
        }
    };
    let mut report = prepared.report("estimate", diagnostics);
    report.estimand = Some(cfg.estimand.to_string());
    report.estimates = Some(estimates);
    report.covariance = covariance;
    Ok(report)
}

/// `test`: scaled mean effects, the homogeneity test and pairwise tests.
pub fn cmd_test(config: &AnalysisConfig) -> CliResult<Report> {
    if config.outcomes.len() < 2 {
        return Err(CliError::Data("test needs at least 2 outcome columns".into()));
    }
    if config.estimand != Estimand::ScaledMean {
        return Err(CliError::Data("test compares scaled mean effects; use --estimand scaled-mean".into()));
    }
    let prepared = prepare(config)?;
    let fits = fit_nuisances(&prepared.dataset, &prepared.specs, &prepared.options)?;
    let mut diagnostics = prepared.diagnostics(&fits);
    let (table, source) = scaled_mean(&prepared, &fits, &mut diagnostics)?;
    let n = prepared.dataset.n();
    let homogeneity = homogeneity_test(&table.estimates, &table.covariance, n, source)?;
    let pairwise = pairwise_tests(
        &table.estimates,
        &table.covariance,
        n,
        &table.labels,
        prepared.config.correction,
        prepared.config.alpha,
    )?;
    diagnostics.pseudo_inverse = Some(homogeneity.pseudo_inverse);
    let mut report = prepared.report("test", diagnostics);
    report.estimand = Some(Estimand::ScaledMean.to_string());
    report.estimates = Some(rows_from_table(&table));
    report.covariance = Some(covariance_block(&table, source));
    report.tests = Some(TestsBlock {
        homogeneity,
        correction: prepared.config.correction,
        alpha: prepared.config.alpha,
        pairwise,
    });
    Ok(report)
}

fn parse_correct(s: &str) -> Result<Correct, String> {
    s.parse::<Correct>().map_err(|e| e.to_string())
}

/// Monte-Carlo study on the built-in four-outcome design.
#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Sample size per replicate
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Number of replicates
    #[arg(long, default_value_t = 1000)]
    pub n_sim: usize,
    /// Effect-heterogeneity parameter; 0 makes all scaled effects equal
    #[arg(long, default_value_t = 2.0)]
    pub lambda: f64,
    /// Correctly specified nuisances: both, trt, out or none
    #[arg(long, default_value = "both", value_parser = parse_correct)]
    pub correct: Correct,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = scaledfx::nuisance::DEFAULT_CLIP)]
    pub clip: f64,
    /// Path for the JSON report
    #[arg(long)]
    pub output: Option<PathBuf>,
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<Report> {
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(CliError::Data(format!("--alpha must lie in (0, 1), got {}", args.alpha)));
    }
    if !(args.clip > 0.0 && args.clip < 0.5) {
        return Err(CliError::Data(format!("--clip must lie in (0, 0.5), got {}", args.clip)));
    }
    if args.n < 10 || args.n_sim == 0 {
        return Err(CliError::Data("--n must be at least 10 and --n-sim at least 1".into()));
    }
    let mut scenario = SimScenario::new(args.n, args.n_sim, args.lambda, args.correct, args.seed);
    scenario.alpha = args.alpha;
    scenario.clip = args.clip;
    let summary = run_replications(&scenario)?;
    let diagnostics = Diagnostics {
        n: Some(args.n),
        clip: Some(args.clip),
        excluded_replicates: Some(summary.excluded),
        ..Diagnostics::default()
    };
    Ok(Report {
        command: "simulate".into(),
        config: serde_json::to_value(&scenario).expect("scenario serializes"),
        estimand: Some(Estimand::ScaledMean.to_string()),
        estimates: None,
        covariance: None,
        tests: None,
        simulation: Some(summary),
        diagnostics,
    })
}

