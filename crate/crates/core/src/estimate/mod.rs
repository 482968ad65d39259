//! Point estimates, covariances and confidence intervals for the scaled mean
//! effect, the quantile effect, stratum effects and the weighted summary.

mod bootstrap;
mod quantile;
mod scaled;
mod stratum;

pub use bootstrap::{bootstrap_covariance, resample_rows, BootstrapResult, MAX_FAILURE_SHARE, MAX_REDRAWS, MIN_REPLICATES};
pub use quantile::{
    closed_form_influence, estimate_cdf, estimate_quantile_effect, invert_cdf, quantile_effect_point, CdfEstimate,
    QuantileEffect, QuantileInference, QuantileMethod,
};
pub use scaled::{estimate_moments, estimate_scaled_effects, scaled_effect_point, ScaledEffects};
pub use stratum::{
    estimate_effect_modification, estimate_effect_modification_regression, estimate_weighted_summary, stratify,
    EffectModification, Projection, RegressionModification, WeightFunction, WeightedSummary,
};

use crate::error::Result;
use crate::model::Dataset;
use crate::nuisance::NuisanceSource;

/// Bootstrap covariance of the scaled mean effects, refitting nuisances from
/// `source` in every replicate.
pub fn bootstrap_scaled_covariance(dataset: &Dataset, source: &NuisanceSource, replicates: usize, seed: u64) -> Result<BootstrapResult> {
    bootstrap_covariance(dataset, |d| scaled_effect_point(d, &source.fit(d)?), replicates, seed)
}
