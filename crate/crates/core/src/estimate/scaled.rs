use crate::error::{Error, Result};
use crate::influence::{eif_scaled, if_components};
use crate::mathkit::empirical_covariance;
use crate::model::{Dataset, EffectTable, InfluenceMatrix, MomentEstimates, NuisanceFits};

/// Scaled mean effects with their influence functions.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledEffects {
    pub table: EffectTable,
    pub moments: MomentEstimates,
    pub influence: InfluenceMatrix,
}

fn column_means(m: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows() as f64;
    m.column_iter().map(|c| c.sum() / n).collect()
}

/// Sample means of phi_0, phi_1, phi_2 per outcome; fails when a control
/// variance beta2 - beta0^2 is degenerate.
pub fn estimate_moments(dataset: &Dataset, fits: &NuisanceFits) -> Result<MomentEstimates> {
    let c = if_components(dataset, fits)?;
    let m = MomentEstimates {
        beta0: column_means(&c.phi0),
        beta1: column_means(&c.phi1),
        beta2: column_means(&c.phi2),
    };
    m.scaled_effects(dataset.outcome_names())?;
    Ok(m)
}

/// psi_k = (beta1 - beta0) / sqrt(beta2 - beta0^2) with covariance equal to
/// the empirical covariance of the influence functions and Wald intervals.
pub fn estimate_scaled_effects(dataset: &Dataset, fits: &NuisanceFits, alpha: f64) -> Result<ScaledEffects> {
    let components = if_components(dataset, fits)?;
    let moments = MomentEstimates {
        beta0: column_means(&components.phi0),
        beta1: column_means(&components.phi1),
        beta2: column_means(&components.phi2),
    };
    let psi = moments.scaled_effects(dataset.outcome_names())?;
    let influence = eif_scaled(&components, &moments, &psi)?;
    if dataset.n() < 2 {
        return Err(Error::InvalidArgument("need at least 2 units for a covariance".into()));
    }
    let covariance = empirical_covariance(&influence.values)?;
    let table = EffectTable::wald(dataset.outcome_names().to_vec(), psi, covariance, dataset.n(), alpha)?;
    Ok(ScaledEffects { table, moments, influence })
}

/// Point estimates only.
pub fn scaled_effect_point(dataset: &Dataset, fits: &NuisanceFits) -> Result<Vec<f64>> {
    let c = if_components(dataset, fits)?;
    MomentEstimates {
        beta0: column_means(&c.phi0),
        beta1: column_means(&c.phi1),
        beta2: column_means(&c.phi2),
    }
    .scaled_effects(dataset.outcome_names())
}
