use serde::{Deserialize, Serialize};

use super::bootstrap::bootstrap_covariance;
use crate::error::{Error, Result};
use crate::influence::{eif_quantile, kernel_density, phi_cdf_at, QUANTILE_SLOTS};
use crate::mathkit::{empirical_covariance, normal_quantile};
use crate::model::{monotonize_rows, Dataset, NuisanceFits};
use crate::nuisance::NuisanceSource;

/// Doubly robust estimate of the potential-outcome CDF F_ak on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfEstimate {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub arm: u8,
    pub outcome: usize,
}

/// Sample mean of phi_cdf at every grid point of the fitted surface, clamped
/// to [0, 1] and monotonized by a running maximum.
pub fn estimate_cdf(dataset: &Dataset, fits: &NuisanceFits, k: usize, a: u8) -> Result<CdfEstimate> {
    if k >= dataset.k() || fits.k() != dataset.k() || fits.n() != dataset.n() {
        return Err(Error::InvalidArgument(format!("no outcome {k} in fits and dataset")));
    }
    let surface = fits
        .cdf(k)
        .ok_or_else(|| Error::InvalidArgument(format!("no CDF surface for outcome {}", k + 1)))?;
    let nu = surface
        .arm(a)
        .ok_or_else(|| Error::InvalidArgument(format!("no CDF surface for arm {a}")))?;
    let n = dataset.n() as f64;
    let grid = surface.grid().to_vec();
    let raw: Vec<f64> = grid
        .iter()
        .enumerate()
        .map(|(g, &y)| phi_cdf_at(dataset, fits, k, a, nu, g, y).iter().sum::<f64>() / n)
        .collect();
    let mut m = nalgebra::DMatrix::from_row_slice(1, raw.len(), &raw);
    monotonize_rows(&mut m);
    Ok(CdfEstimate { grid, values: m.iter().copied().collect(), arm: a, outcome: k })
}

/// Generalized inverse on the grid: the smallest grid value y with F(y) >= q.
pub fn invert_cdf(cdf: &CdfEstimate, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile level must lie in (0, 1), got {q}")));
    }
    cdf.values
        .iter()
        .position(|&f| f >= q)
        .map(|g| cdf.grid[g])
        .ok_or(Error::GridDoesNotBracket(q))
}

/// Confidence-interval method for the quantile effect.
#[derive(Debug, Clone)]
pub enum QuantileInference {
    /// Point estimate and quantiles only.
    PointOnly,
    /// Pairs bootstrap refitting the nuisances of the analysed outcome.
    Bootstrap { replicates: usize, seed: u64, source: NuisanceSource },
    /// Influence function with kernel density estimates at the quantiles.
    ClosedForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantileMethod {
    PointOnly,
    Bootstrap,
    ClosedForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileEffect {
    pub outcome: String,
    pub estimate: f64,
    /// (treated median, control median, control upper quartile, control lower quartile).
    pub quantiles: [f64; 4],
    pub std_error: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub alpha: f64,
    pub method: QuantileMethod,
    pub n: usize,
}

fn quantiles_and_effect(treated: &CdfEstimate, control: &CdfEstimate, label: &str) -> Result<(f64, [f64; 4])> {
    let xi = [
        invert_cdf(treated, 0.5)?,
        invert_cdf(control, 0.5)?,
        invert_cdf(control, 0.75)?,
        invert_cdf(control, 0.25)?,
    ];
    let iqr = xi[2] - xi[3];
    if !(iqr > 0.0) {
        return Err(Error::ZeroIqr(label.to_string()));
    }
    Ok(((xi[0] - xi[1]) / iqr, xi))
}

/// psi^q = (F_1^-1(.5) - F_0^-1(.5)) / (F_0^-1(.75) - F_0^-1(.25)) and the four quantiles.
pub fn quantile_effect_point(dataset: &Dataset, fits: &NuisanceFits, k: usize) -> Result<(f64, [f64; 4])> {
    let treated = estimate_cdf(dataset, fits, k, 1)?;
    let control = estimate_cdf(dataset, fits, k, 0)?;
    quantiles_and_effect(&treated, &control, &dataset.outcome_names()[k])
}

/// Quantile scaled effect for outcome `k` with the chosen interval method.
/// Intervals are Wald intervals around the point estimate.
pub fn estimate_quantile_effect(
    dataset: &Dataset,
    fits: &NuisanceFits,
    k: usize,
    alpha: f64,
    inference: &QuantileInference,
) -> Result<QuantileEffect> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let (estimate, xi) = quantile_effect_point(dataset, fits, k)?;
    let n = dataset.n();
    let (variance, method) = match inference {
        QuantileInference::PointOnly => (None, QuantileMethod::PointOnly),
        QuantileInference::Bootstrap { replicates, seed, source } => {
            let single = dataset.with_outcomes(
                nalgebra::DMatrix::from_column_slice(n, 1, &dataset.outcome(k)),
                vec![dataset.outcome_names()[k].clone()],
            )?;
            let source = source.for_outcome(k);
            let boot = bootstrap_covariance(
                &single,
                |d| {
                    let f = source.fit(d)?;
                    Ok(vec![quantile_effect_point(d, &f, 0)?.0])
                },
                *replicates,
                *seed,
            )?;
            (Some(boot.covariance.get(0, 0)), QuantileMethod::Bootstrap)
        }
        QuantileInference::ClosedForm => {
            let eif = closed_form_influence(dataset, fits, k, xi, estimate)?;
            let cov = empirical_covariance(&nalgebra::DMatrix::from_column_slice(n, 1, &eif))?;
            (Some(cov.get(0, 0)), QuantileMethod::ClosedForm)
        }
    };
    let z = normal_quantile(1.0 - alpha / 2.0)?;
    let std_error = variance.map(|v| (v.max(0.0) / n as f64).sqrt());
    Ok(QuantileEffect {
        outcome: dataset.outcome_names()[k].clone(),
        estimate,
        quantiles: xi,
        std_error,
        ci_lower: std_error.map(|s| estimate - z * s),
        ci_upper: std_error.map(|s| estimate + z * s),
        alpha,
        method,
        n,
    })
}

/// Per-unit quantile-effect influence values. Densities of Y^a at the
/// quantiles come from an inverse-propensity-weighted kernel estimate on the
/// arm's outcomes.
pub fn closed_form_influence(
    dataset: &Dataset,
    fits: &NuisanceFits,
    k: usize,
    xi: [f64; 4],
    psi_q: f64,
) -> Result<Vec<f64>> {
    let surface = fits
        .cdf(k)
        .ok_or_else(|| Error::InvalidArgument(format!("no CDF surface for outcome {}", k + 1)))?;
    let y = dataset.outcome(k);
    let mut phis: Vec<Vec<f64>> = Vec::with_capacity(4);
    let mut density = [0.0; 4];
    for (s, &(a, _)) in QUANTILE_SLOTS.iter().enumerate() {
        let nu = surface
            .arm(a)
            .ok_or_else(|| Error::InvalidArgument(format!("no CDF surface for arm {a}")))?;
        let g = surface
            .grid()
            .iter()
            .position(|&v| v == xi[s])
            .ok_or_else(|| Error::InvalidArgument(format!("quantile {} is not a grid value", xi[s])))?;
        phis.push(phi_cdf_at(dataset, fits, k, a, nu, g, xi[s]));
        let (values, weights): (Vec<f64>, Vec<f64>) = dataset
            .treatment()
            .iter()
            .enumerate()
            .filter(|(_, &ai)| ai == a)
            .map(|(i, _)| (y[i], 1.0 / fits.arm_probability(i, a)))
            .unzip();
        density[s] = kernel_density(&values, &weights, xi[s])?;
    }
    eif_quantile([&phis[0], &phis[1], &phis[2], &phis[3]], xi, density, psi_q)
}
