//! Per-unit influence-function components and assembled efficient influence
//! functions for the scaled mean effect, the quantile effect, and the
//! weighted summary.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{
    Dataset, InfluenceKind, InfluenceMatrix, MomentEstimates, NuisanceFits, DEGENERATE_VARIANCE,
};

/// phi_0, phi_1, phi_2 evaluations, each n x K.
#[derive(Debug, Clone, PartialEq)]
pub struct IfComponents {
    pub phi0: DMatrix<f64>,
    pub phi1: DMatrix<f64>,
    pub phi2: DMatrix<f64>,
}

fn check_shapes(dataset: &Dataset, fits: &NuisanceFits, k: usize) -> Result<()> {
    if fits.n() != dataset.n() || fits.k() != dataset.k() {
        return Err(Error::InvalidArgument(format!(
            "nuisance fits are for {} units and {} outcomes, dataset has {} and {}",
            fits.n(),
            fits.k(),
            dataset.n(),
            dataset.k()
        )));
    }
    if k >= dataset.k() {
        return Err(Error::InvalidArgument(format!("no outcome {k}")));
    }
    Ok(())
}

/// 1(A = a) / pi(a|X) * {Y_k - mu_k(X, a)} + mu_k(X, a).
pub fn phi_a(dataset: &Dataset, fits: &NuisanceFits, k: usize, a: u8) -> Result<Vec<f64>> {
    check_shapes(dataset, fits, k)?;
    let y = dataset.outcomes();
    let mu = fits.outcome_mean(a);
    Ok(dataset
        .treatment()
        .iter()
        .enumerate()
        .map(|(i, &ai)| {
            let m = mu[(i, k)];
            if ai == a {
                (y[(i, k)] - m) / fits.arm_probability(i, a) + m
            } else {
                m
            }
        })
        .collect())
}

/// 1(A = 0) / pi(0|X) * {Y_k^2 - eta_k(X, 0)} + eta_k(X, 0).
pub fn phi_2(dataset: &Dataset, fits: &NuisanceFits, k: usize) -> Result<Vec<f64>> {
    check_shapes(dataset, fits, k)?;
    let y = dataset.outcomes();
    let eta = fits.second_moment();
    Ok(dataset
        .treatment()
        .iter()
        .enumerate()
        .map(|(i, &ai)| {
            let e = eta[(i, k)];
            if ai == 0 {
                let yi = y[(i, k)];
                (yi * yi - e) / fits.arm_probability(i, 0) + e
            } else {
                e
            }
        })
        .collect())
}

/// Index of the largest grid value <= y, if any.
fn grid_position(grid: &[f64], y: f64) -> Option<usize> {
    let count = grid.partition_point(|&g| g <= y);
    count.checked_sub(1)
}

/// 1(A = a) / pi(a|X) * {1(Y_k <= y) - nu_k(y|X, a)} + nu_k(y|X, a).
///
/// nu is read off the fitted CDF surface as a right-continuous step function
/// of the grid, and is 0 below the first grid value.
pub fn phi_cdf(dataset: &Dataset, fits: &NuisanceFits, k: usize, a: u8, y: f64) -> Result<Vec<f64>> {
    check_shapes(dataset, fits, k)?;
    let surface = fits
        .cdf(k)
        .ok_or_else(|| Error::InvalidArgument(format!("no CDF surface for outcome {}", k + 1)))?;
    let nu = surface
        .arm(a)
        .ok_or_else(|| Error::InvalidArgument(format!("no CDF surface for arm {a}")))?;
    let col = grid_position(surface.grid(), y);
    let outcome = dataset.outcomes();
    Ok(dataset
        .treatment()
        .iter()
        .enumerate()
        .map(|(i, &ai)| {
            let v = col.map_or(0.0, |g| nu[(i, g)]);
            if ai == a {
                let ind = f64::from(u8::from(outcome[(i, k)] <= y));
                (ind - v) / fits.arm_probability(i, a) + v
            } else {
                v
            }
        })
        .collect())
}

/// Same as [`phi_cdf`] at grid index `g` for every unit, skipping the lookup.
pub(crate) fn phi_cdf_at(dataset: &Dataset, fits: &NuisanceFits, k: usize, a: u8, nu: &DMatrix<f64>, g: usize, y: f64) -> Vec<f64> {
    let outcome = dataset.outcomes();
    dataset
        .treatment()
        .iter()
        .enumerate()
        .map(|(i, &ai)| {
            let v = nu[(i, g)];
            if ai == a {
                let ind = f64::from(u8::from(outcome[(i, k)] <= y));
                (ind - v) / fits.arm_probability(i, a) + v
            } else {
                v
            }
        })
        .collect()
}

/// All three components for every outcome.
pub fn if_components(dataset: &Dataset, fits: &NuisanceFits) -> Result<IfComponents> {
    let n = dataset.n();
    let k = dataset.k();
    let mut phi0 = DMatrix::zeros(n, k);
    let mut phi1 = DMatrix::zeros(n, k);
    let mut phi2 = DMatrix::zeros(n, k);
    for j in 0..k {
        phi0.set_column(j, &nalgebra::DVector::from_vec(phi_a(dataset, fits, j, 0)?));
        phi1.set_column(j, &nalgebra::DVector::from_vec(phi_a(dataset, fits, j, 1)?));
        phi2.set_column(j, &nalgebra::DVector::from_vec(phi_2(dataset, fits, j)?));
    }
    Ok(IfComponents { phi0, phi1, phi2 })
}

fn control_sd(b0: f64, b2: f64, label: &str) -> Result<f64> {
    let var = b2 - b0 * b0;
    if !(var >= DEGENERATE_VARIANCE) {
        return Err(Error::DegenerateVariance(label.to_string()));
    }
    Ok(var.sqrt())
}

/// The scaled effect g(beta) = (beta1 - beta0) / sqrt(beta2 - beta0^2).
pub fn scaled_effect(beta: [f64; 3]) -> Result<f64> {
    let sd = control_sd(beta[0], beta[2], "beta")?;
    Ok((beta[1] - beta[0]) / sd)
}

/// Gradient of g at beta = (beta0, beta1, beta2):
/// (1/sd) * (psi beta0 / sd - 1, 1, -psi / (2 sd)).
pub fn grad_g(beta: [f64; 3]) -> Result<[f64; 3]> {
    let sd = control_sd(beta[0], beta[2], "beta")?;
    let psi = (beta[1] - beta[0]) / sd;
    Ok([(psi * beta[0] / sd - 1.0) / sd, 1.0 / sd, -psi / (2.0 * sd * sd)])
}

/// Efficient influence function of the scaled effects, n x K:
/// (phi1 - phi0)/sd - psi [phi2 + beta2 - 2 beta0 phi0] / (2 sd^2).
///
/// With beta and psi computed from the same components the column means
/// vanish identically.
pub fn eif_scaled(components: &IfComponents, beta: &MomentEstimates, psi: &[f64]) -> Result<InfluenceMatrix> {
    let (n, k) = components.phi0.shape();
    if beta.len() != k || psi.len() != k {
        return Err(Error::InvalidArgument(format!(
            "{} moment rows and {} effects for {k} outcomes",
            beta.len(),
            psi.len()
        )));
    }
    let mut values = DMatrix::zeros(n, k);
    for j in 0..k {
        let [b0, _, b2] = beta.row(j);
        let sd = control_sd(b0, b2, &format!("outcome {}", j + 1))?;
        let var = sd * sd;
        for i in 0..n {
            let p0 = components.phi0[(i, j)];
            let p1 = components.phi1[(i, j)];
            let p2 = components.phi2[(i, j)];
            values[(i, j)] = (p1 - p0) / sd - psi[j] * (p2 + b2 - 2.0 * b0 * p0) / (2.0 * var);
        }
    }
    Ok(InfluenceMatrix { values, kind: InfluenceKind::ScaledMean })
}

/// Quantile levels matching the four slots of [`eif_quantile`].
pub const QUANTILE_SLOTS: [(u8, f64); 4] = [(1, 0.5), (0, 0.5), (0, 0.75), (0, 0.25)];

/// Efficient influence function of the quantile effect for one outcome.
///
/// Slots are ordered (treated median, control median, control upper
/// quartile, control lower quartile), see [`QUANTILE_SLOTS`]. `phi_grid[s]`
/// holds the CDF influence values at `xi[s]`. Each quantile's influence is
/// -(1/f) [phi_cdf(xi) - q]; they combine as
/// {(phi_1^.5 - phi_0^.5) - psi_q (phi_0^.75 - phi_0^.25)} / IQR.
pub fn eif_quantile(phi_grid: [&[f64]; 4], xi: [f64; 4], density_at_xi: [f64; 4], psi_q: f64) -> Result<Vec<f64>> {
    let iqr = xi[2] - xi[3];
    if !(iqr > 0.0) {
        return Err(Error::ZeroIqr(format!("quantiles {} and {}", xi[3], xi[2])));
    }
    for (s, &f) in density_at_xi.iter().enumerate() {
        if !(f > 0.0 && f.is_finite()) {
            return Err(Error::NonPositiveDensity(xi[s]));
        }
    }
    let n = phi_grid[0].len();
    if phi_grid.iter().any(|p| p.len() != n) {
        return Err(Error::InvalidArgument("CDF influence vectors differ in length".into()));
    }
    let quantile_if = |s: usize, i: usize| -(phi_grid[s][i] - QUANTILE_SLOTS[s].1) / density_at_xi[s];
    Ok((0..n)
        .map(|i| {
            let median_diff = quantile_if(0, i) - quantile_if(1, i);
            let spread = quantile_if(2, i) - quantile_if(3, i);
            (median_diff - psi_q * spread) / iqr
        })
        .collect())
}

/// Stratum-specific influence of gamma_k(v) for one outcome and stratum:
/// 1(V = v)/P(V = v) * ((phi1 - phi0)/sd_v - gamma [phi2 + b2_v - 2 b0_v phi0] / (2 sd_v^2)).
///
/// `moments` are (b0_v, b1_v, b2_v), the stratum-restricted means of the
/// components; `in_stratum[i]` marks V_i = v.
pub fn eif_stratum(
    components: &IfComponents,
    k: usize,
    in_stratum: &[bool],
    probability: f64,
    moments: [f64; 3],
    gamma: f64,
) -> Result<Vec<f64>> {
    let [b0, _, b2] = moments;
    let sd = control_sd(b0, b2, &format!("outcome {}", k + 1))?;
    let var = sd * sd;
    Ok(in_stratum
        .iter()
        .enumerate()
        .map(|(i, &inside)| {
            if !inside {
                return 0.0;
            }
            let p0 = components.phi0[(i, k)];
            let p1 = components.phi1[(i, k)];
            let p2 = components.phi2[(i, k)];
            ((p1 - p0) / sd - gamma * (p2 + b2 - 2.0 * b0 * p0) / (2.0 * var)) / probability
        })
        .collect())
}

/// Efficient influence function of the weighted summary psi*:
/// sum_k w_k(V) {P(V) phi_k^(V) + gamma_k(V)} - psi*.
///
/// `stratum_eifs[k][s]` is the [`eif_stratum`] output for outcome k and
/// stratum s, `gamma[k][s]` the matching effect, `weights[k][s]` the weight,
/// `probability[s]` the stratum share and `stratum_of[i]` the unit's stratum.
/// The stratum influence carries a 1/P(V = v) factor that the summary's own
/// P(V = v) weighting cancels, hence the P(V) multiplier.
pub fn eif_weighted(
    stratum_eifs: &[Vec<Vec<f64>>],
    gamma: &[Vec<f64>],
    weights: &[Vec<f64>],
    probability: &[f64],
    stratum_of: &[usize],
    psi_star: f64,
) -> Result<Vec<f64>> {
    let k = stratum_eifs.len();
    if gamma.len() != k || weights.len() != k {
        return Err(Error::InvalidArgument("weighted summary inputs disagree on outcome count".into()));
    }
    for (s, &p) in probability.iter().enumerate() {
        let used = weights.iter().any(|w| w.get(s).is_some_and(|&v| v != 0.0));
        if used && !(p > 0.0) {
            return Err(Error::EmptyStratum(format!("#{}", s + 1)));
        }
    }
    Ok(stratum_of
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let total: f64 = (0..k)
                .map(|j| weights[j][s] * (probability[s] * stratum_eifs[j][s][i] + gamma[j][s]))
                .sum();
            total - psi_star
        })
        .collect())
}

/// Gaussian kernel density estimate at `at` from weighted observations, with
/// Silverman's rule-of-thumb bandwidth 0.9 min(sd, IQR/1.34) m^(-1/5) where m
/// is the Kish effective sample size.
pub fn kernel_density(values: &[f64], weights: &[f64], at: f64) -> Result<f64> {
    if values.is_empty() || values.len() != weights.len() {
        return Err(Error::InvalidArgument("density estimate needs matching nonempty values and weights".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("density weights sum to zero".into()));
    }
    let mean = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total;
    let var = values.iter().zip(weights).map(|(v, w)| w * (v - mean).powi(2)).sum::<f64>() / total;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let weighted_quantile = |q: f64| {
        let mut acc = 0.0;
        for &i in &order {
            acc += weights[i];
            if acc >= q * total {
                return values[i];
            }
        }
        values[*order.last().unwrap()]
    };
    let iqr = weighted_quantile(0.75) - weighted_quantile(0.25);
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    let effective = total * total / sq;
    let spread = if iqr > 0.0 { var.sqrt().min(iqr / 1.34) } else { var.sqrt() };
    let h = 0.9 * spread * effective.powf(-0.2);
    if !(h > 0.0) {
        return Err(Error::NonPositiveDensity(at));
    }
    let density = values
        .iter()
        .zip(weights)
        .map(|(v, w)| w * crate::mathkit::normal_pdf((at - v) / h))
        .sum::<f64>()
        / (total * h);
    Ok(density)
}
