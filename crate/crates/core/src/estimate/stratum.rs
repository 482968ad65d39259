use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::influence::{eif_stratum, eif_weighted, if_components, IfComponents};
use crate::mathkit::{empirical_covariance, mean};
use crate::model::{Dataset, EffectTable, InfluenceKind, InfluenceMatrix, NuisanceFits, DEGENERATE_VARIANCE};
use crate::nuisance::{fit_linear, FitResult};

/// Distinct values of a discrete covariate, ascending, and each unit's index
/// into them.
pub fn stratify(dataset: &Dataset, column: &str) -> Result<(Vec<f64>, Vec<usize>)> {
    let v = dataset.covariate(column)?;
    let mut strata = v.clone();
    strata.sort_by(f64::total_cmp);
    strata.dedup();
    let of = v
        .iter()
        .map(|x| strata.binary_search_by(|s| s.total_cmp(x)).expect("value is a stratum"))
        .collect();
    Ok((strata, of))
}

fn stratum_label(column: &str, v: f64) -> String {
    format!("{column}={v}")
}

/// Stratum-specific effects gamma_k(v) for every outcome k and stratum v.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectModification {
    pub column: String,
    pub strata: Vec<f64>,
    /// Sample share of each stratum.
    pub probability: Vec<f64>,
    /// Stratum-restricted (beta0, beta1, beta2), indexed [k][s].
    pub moments: Vec<Vec<[f64; 3]>>,
    /// Entries ordered outcome-major: index k * S + s.
    pub table: EffectTable,
    pub influence: InfluenceMatrix,
    pub marginal_sd: bool,
    pub(crate) stratum_of: Vec<usize>,
}

impl EffectModification {
    pub fn len_strata(&self) -> usize {
        self.strata.len()
    }

    pub fn index(&self, k: usize, s: usize) -> usize {
        k * self.strata.len() + s
    }

    pub fn gamma(&self, k: usize, s: usize) -> f64 {
        self.table.estimates[self.index(k, s)]
    }

    /// Each unit's stratum index.
    pub fn stratum_of(&self) -> &[usize] {
        &self.stratum_of
    }
}

fn restricted_mean(values: impl Iterator<Item = f64>, in_stratum: &[bool], count: f64) -> f64 {
    values.zip(in_stratum).filter(|(_, &b)| b).map(|(v, _)| v).sum::<f64>() / count
}

/// gamma_k(v) = {E(Y^1|v) - E(Y^0|v)} / sd(Y^0|v), each conditional moment
/// estimated by the stratum-restricted mean of the influence components.
///
/// With `marginal_sd`, every stratum is standardized by the overall control
/// standard deviation instead of the stratum one.
pub fn estimate_effect_modification(
    dataset: &Dataset,
    fits: &NuisanceFits,
    stratum_column: &str,
    alpha: f64,
    marginal_sd: bool,
) -> Result<EffectModification> {
    let (strata, stratum_of) = stratify(dataset, stratum_column)?;
    let n = dataset.n();
    let s_count = strata.len();
    let a = dataset.treatment();
    for (s, &v) in strata.iter().enumerate() {
        for arm in [0u8, 1] {
            if !(0..n).any(|i| stratum_of[i] == s && a[i] == arm) {
                return Err(Error::EmptyStratum(stratum_label(stratum_column, v)));
            }
        }
    }
    let components = if_components(dataset, fits)?;
    let k_count = dataset.k();
    let probability: Vec<f64> = (0..s_count)
        .map(|s| stratum_of.iter().filter(|&&t| t == s).count() as f64 / n as f64)
        .collect();

    let mut labels = Vec::with_capacity(k_count * s_count);
    let mut estimates = Vec::with_capacity(k_count * s_count);
    let mut moments = Vec::with_capacity(k_count);
    let mut values = DMatrix::zeros(n, k_count * s_count);
    for k in 0..k_count {
        let name = &dataset.outcome_names()[k];
        let phi0: Vec<f64> = components.phi0.column(k).iter().copied().collect();
        let phi1: Vec<f64> = components.phi1.column(k).iter().copied().collect();
        let phi2: Vec<f64> = components.phi2.column(k).iter().copied().collect();
        let marginal = [mean(&phi0), mean(&phi1), mean(&phi2)];
        let mut row = Vec::with_capacity(s_count);
        for (s, &v) in strata.iter().enumerate() {
            let inside: Vec<bool> = stratum_of.iter().map(|&t| t == s).collect();
            let count = probability[s] * n as f64;
            let m = [
                restricted_mean(phi0.iter().copied(), &inside, count),
                restricted_mean(phi1.iter().copied(), &inside, count),
                restricted_mean(phi2.iter().copied(), &inside, count),
            ];
            let label = format!("{name} | {}", stratum_label(stratum_column, v));
            let (gamma, eif) = if marginal_sd {
                marginal_sd_effect(&phi0, &phi1, &phi2, &inside, probability[s], m, marginal, &label)?
            } else {
                let var = m[2] - m[0] * m[0];
                if !(var >= DEGENERATE_VARIANCE) {
                    return Err(Error::DegenerateVariance(label));
                }
                let gamma = (m[1] - m[0]) / var.sqrt();
                (gamma, eif_stratum(&components, k, &inside, probability[s], m, gamma)?)
            };
            let col = k * s_count + s;
            for (i, e) in eif.into_iter().enumerate() {
                values[(i, col)] = e;
            }
            labels.push(label);
            estimates.push(gamma);
            row.push(m);
        }
        moments.push(row);
    }
    let covariance = empirical_covariance(&values)?;
    let table = EffectTable::wald(labels, estimates, covariance, n, alpha)?;
    Ok(EffectModification {
        column: stratum_column.to_string(),
        strata,
        probability,
        moments,
        table,
        influence: InfluenceMatrix { values, kind: InfluenceKind::Stratum },
        marginal_sd,
        stratum_of,
    })
}

/// (b1_v - b0_v) / sd with sd the overall control SD, and its influence:
/// 1(V=v)/P(v) (phi1 - phi0 - (b1_v - b0_v)) / sd - gamma [phi2 - b2 - 2 b0 (phi0 - b0)] / (2 sd^2).
#[allow(clippy::too_many_arguments)]
fn marginal_sd_effect(
    phi0: &[f64],
    phi1: &[f64],
    phi2: &[f64],
    inside: &[bool],
    probability: f64,
    m: [f64; 3],
    marginal: [f64; 3],
    label: &str,
) -> Result<(f64, Vec<f64>)> {
    let var = marginal[2] - marginal[0] * marginal[0];
    if !(var >= DEGENERATE_VARIANCE) {
        return Err(Error::DegenerateVariance(label.to_string()));
    }
    let sd = var.sqrt();
    let diff = m[1] - m[0];
    let gamma = diff / sd;
    let eif = (0..phi0.len())
        .map(|i| {
            let num = if inside[i] { (phi1[i] - phi0[i] - diff) / probability } else { 0.0 };
            let dvar = phi2[i] - marginal[2] - 2.0 * marginal[0] * (phi0[i] - marginal[0]);
            num / sd - gamma * dvar / (2.0 * var)
        })
        .collect();
    Ok((gamma, eif))
}

/// Nonnegative weights w_k(v) keyed by outcome index and stratum value;
/// pairs not listed take the default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFunction {
    entries: BTreeMap<(usize, u64), f64>,
    default: f64,
}

fn key(v: f64) -> u64 {
    // -0.0 and 0.0 are the same stratum
    (v + 0.0).to_bits()
}

fn check_weight(w: f64) -> Result<f64> {
    if w.is_finite() && w >= 0.0 {
        Ok(w)
    } else {
        Err(Error::InvalidArgument(format!("weights must be finite and nonnegative, got {w}")))
    }
}

impl WeightFunction {
    /// w_k(v) = w for every pair.
    pub fn constant(w: f64) -> Result<Self> {
        Ok(Self { entries: BTreeMap::new(), default: check_weight(w)? })
    }

    /// w_k(v) = 1(v = k), with outcomes numbered from 1.
    pub fn selected_outcome(k_count: usize) -> Self {
        let entries = (0..k_count).map(|k| ((k, key((k + 1) as f64)), 1.0)).collect();
        Self { entries, default: 0.0 }
    }

    /// Explicit (outcome index, stratum value, weight) entries.
    pub fn from_entries(entries: impl IntoIterator<Item = (usize, f64, f64)>, default: f64) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (k, v, w) in entries {
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!("stratum value {v} is not finite")));
            }
            map.insert((k, key(v)), check_weight(w)?);
        }
        Ok(Self { entries: map, default: check_weight(default)? })
    }

    pub fn get(&self, k: usize, v: f64) -> f64 {
        self.entries.get(&(k, key(v))).copied().unwrap_or(self.default)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSummary {
    /// One row, labelled "psi*".
    pub table: EffectTable,
    pub influence: InfluenceMatrix,
    pub modification: EffectModification,
}

/// psi* = sum_k sum_v P(V = v) w_k(v) gamma_k(v) with its influence-function
/// standard error.
pub fn estimate_weighted_summary(
    dataset: &Dataset,
    fits: &NuisanceFits,
    stratum_column: &str,
    weights: &WeightFunction,
    alpha: f64,
) -> Result<WeightedSummary> {
    let modification = estimate_effect_modification(dataset, fits, stratum_column, alpha, false)?;
    let k_count = dataset.k();
    let s_count = modification.len_strata();
    let w: Vec<Vec<f64>> = (0..k_count)
        .map(|k| modification.strata.iter().map(|&v| weights.get(k, v)).collect())
        .collect();
    let gamma: Vec<Vec<f64>> = (0..k_count)
        .map(|k| (0..s_count).map(|s| modification.gamma(k, s)).collect())
        .collect();
    let psi_star: f64 = (0..k_count)
        .flat_map(|k| (0..s_count).map(move |s| (k, s)))
        .map(|(k, s)| modification.probability[s] * w[k][s] * gamma[k][s])
        .sum();
    let stratum_eifs: Vec<Vec<Vec<f64>>> = (0..k_count)
        .map(|k| {
            (0..s_count)
                .map(|s| {
                    modification
                        .influence
                        .values
                        .column(modification.index(k, s))
                        .iter()
                        .copied()
                        .collect()
                })
                .collect()
        })
        .collect();
    let eif = eif_weighted(&stratum_eifs, &gamma, &w, &modification.probability, &modification.stratum_of, psi_star)?;
    let n = dataset.n();
    let values = DMatrix::from_column_slice(n, 1, &eif);
    let covariance = empirical_covariance(&values)?;
    let table = EffectTable::wald(vec!["psi*".into()], vec![psi_star], covariance, n, alpha)?;
    Ok(WeightedSummary {
        table,
        influence: InfluenceMatrix { values, kind: InfluenceKind::WeightedSummary },
        modification,
    })
}

/// Second-stage least-squares projection of gamma_k onto a linear model in v.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub fit: FitResult,
    pub residuals: Vec<f64>,
}

/// gamma_k(v) from linear regressions of the influence components on V.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionModification {
    pub columns: Vec<String>,
    /// Evaluation points, one row per point.
    pub points: DMatrix<f64>,
    /// gamma_k at each point, points x K.
    pub gamma: DMatrix<f64>,
    /// Per outcome, the regressions of phi_0, phi_1 and phi_2 on V.
    pub stage_one: Vec<[FitResult; 3]>,
    pub projection: Option<Vec<Projection>>,
}

/// Regresses phi_0, phi_1, phi_2 on the V columns, forms
/// gamma(v) = (m1(v) - m0(v)) / sqrt(m2(v) - m0(v)^2) at each evaluation point
/// (default: the sample's own V values), and optionally projects those
/// values onto a linear model in v by least squares.
pub fn estimate_effect_modification_regression(
    dataset: &Dataset,
    fits: &NuisanceFits,
    v_columns: &[String],
    points: Option<&DMatrix<f64>>,
    second_stage: bool,
) -> Result<RegressionModification> {
    let idx = v_columns
        .iter()
        .map(|c| dataset.covariate_index(c))
        .collect::<Result<Vec<_>>>()?;
    let x = dataset.covariates();
    let design = DMatrix::from_fn(dataset.n(), idx.len(), |i, j| x[(i, idx[j])]);
    let points = match points {
        Some(p) if p.ncols() != idx.len() => {
            return Err(Error::InvalidArgument(format!(
                "evaluation points have {} columns for {} V columns",
                p.ncols(),
                idx.len()
            )))
        }
        Some(p) => p.clone(),
        None => design.clone(),
    };
    let components: IfComponents = if_components(dataset, fits)?;
    let k_count = dataset.k();
    let m = points.nrows();
    let mut gamma = DMatrix::zeros(m, k_count);
    let mut stage_one = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let fit = |phi: &DMatrix<f64>| {
            let y: Vec<f64> = phi.column(k).iter().copied().collect();
            fit_linear(&design, &y, None)
        };
        let fitted = [fit(&components.phi0)?, fit(&components.phi1)?, fit(&components.phi2)?];
        let pred: Vec<Vec<f64>> = fitted.iter().map(|f| f.linear_predictor(&points)).collect();
        for r in 0..m {
            let var = pred[2][r] - pred[0][r] * pred[0][r];
            if !(var >= DEGENERATE_VARIANCE) {
                let at: Vec<String> = points.row(r).iter().map(|v| v.to_string()).collect();
                return Err(Error::DegenerateVariance(format!(
                    "{} at v=({})",
                    dataset.outcome_names()[k],
                    at.join(", ")
                )));
            }
            gamma[(r, k)] = (pred[1][r] - pred[0][r]) / var.sqrt();
        }
        stage_one.push(fitted);
    }
    let projection = if second_stage {
        Some(
            (0..k_count)
                .map(|k| {
                    let g: Vec<f64> = gamma.column(k).iter().copied().collect();
                    let fit = fit_linear(&points, &g, None)?;
                    let residuals = fit.linear_predictor(&points).iter().zip(&g).map(|(p, y)| y - p).collect();
                    Ok(Projection { fit, residuals })
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(RegressionModification {
        columns: v_columns.to_vec(),
        points,
        gamma,
        stage_one,
        projection,
    })
}
