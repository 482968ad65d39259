//! Homogeneity test of equal scaled effects across outcomes and pairwise
//! comparisons with multiplicity corrections.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathkit::{chisq_upper_tail, pseudo_inverse, spd_inverse, SymmetricMatrix, PINV_RELATIVE_THRESHOLD};

/// (K-1) x K banded contrast matrix with C_ij = 1(i = j) - 1(i = j - 1).
pub fn contrast_matrix(k: usize) -> Result<DMatrix<f64>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("contrasts need at least 2 outcomes, got {k}")));
    }
    Ok(DMatrix::from_fn(k - 1, k, |i, j| {
        if i == j {
            1.0
        } else if i + 1 == j {
            -1.0
        } else {
            0.0
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceSource {
    ClosedForm,
    Bootstrap,
}

impl fmt::Display for CovarianceSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CovarianceSource::ClosedForm => "closed-form",
            CovarianceSource::Bootstrap => "bootstrap",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub covariance_source: CovarianceSource,
    /// True when C Sigma C' was singular and its pseudo-inverse was used,
    /// with df reduced to the numerical rank.
    pub pseudo_inverse: bool,
}

/// T_n = n (C psi)' (C Sigma C')^-1 (C psi) referred to chi^2 with K - 1 df,
/// using the banded contrast matrix.
pub fn homogeneity_test(psi: &[f64], sigma: &SymmetricMatrix, n: usize, source: CovarianceSource) -> Result<TestResult> {
    homogeneity_test_with_contrast(psi, sigma, n, &contrast_matrix(psi.len())?, source)
}

/// As [`homogeneity_test`] with any contrast matrix whose rows span the
/// differences of the effects.
///
/// A singular C Sigma C' is inverted by eigen-thresholded pseudo-inverse with
/// df equal to its numerical rank. If it vanishes altogether (duplicated
/// outcomes) and the effects agree, the result is T = 0, df = 0, p = 1.
pub fn homogeneity_test_with_contrast(
    psi: &[f64],
    sigma: &SymmetricMatrix,
    n: usize,
    contrast: &DMatrix<f64>,
    source: CovarianceSource,
) -> Result<TestResult> {
    let k = psi.len();
    if k < 2 {
        return Err(Error::InvalidArgument("homogeneity test needs at least 2 outcomes".into()));
    }
    if sigma.dim() != k || contrast.ncols() != k {
        return Err(Error::InvalidArgument(format!(
            "{k} effects with a {}x{} covariance and a contrast with {} columns",
            sigma.dim(),
            sigma.dim(),
            contrast.ncols()
        )));
    }
    let c_psi = contrast * DVector::from_column_slice(psi);
    let middle = SymmetricMatrix::from_dense(&(contrast * sigma.to_dense() * contrast.transpose()))?;
    // contrast variances negligible next to the effect variances count as zero
    let scale = sigma.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs()))
        * contrast.row_iter().map(|r| r.norm_squared()).fold(0.0_f64, f64::max);
    let largest = middle.diagonal().iter().fold(0.0_f64, |m, v| m.max(*v));
    if largest <= PINV_RELATIVE_THRESHOLD * scale {
        let c_scale = c_psi.amax();
        let psi_scale = psi.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if c_scale > 1e-10 * psi_scale.max(1.0) {
            return Err(Error::Singular("contrast covariance is zero but the effects differ".into()));
        }
        return Ok(TestResult { statistic: 0.0, df: 0, p_value: 1.0, covariance_source: source, pseudo_inverse: true });
    }
    let (inverse, rank, pinv) = match spd_inverse(&middle) {
        Some(inv) => (inv, middle.dim(), false),
        None => {
            let p = pseudo_inverse(&middle)?;
            (p.value, p.rank, true)
        }
    };
    let df = rank;
    let statistic = (n as f64 * c_psi.dot(&(&inverse * &c_psi))).max(0.0);
    let p_value = chisq_upper_tail(statistic, df as f64)?;
    Ok(TestResult { statistic, df, p_value, covariance_source: source, pseudo_inverse: pinv })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Correction {
    Bonferroni,
    BenjaminiHochberg,
}

impl FromStr for Correction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bonferroni" => Ok(Correction::Bonferroni),
            "bh" | "benjamini-hochberg" => Ok(Correction::BenjaminiHochberg),
            other => Err(Error::InvalidArgument(format!("unknown correction `{other}`"))),
        }
    }
}

impl fmt::Display for Correction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Correction::Bonferroni => "bonferroni",
            Correction::BenjaminiHochberg => "benjamini-hochberg",
        })
    }
}

/// Adjusted p-values. Bonferroni multiplies by m (capped at 1); BH uses the
/// step-up adjustment min_{j >= i} m p_(j) / j, so that rejecting adjusted
/// p <= alpha reproduces the step-up rule.
pub fn adjust_p_values(p: &[f64], correction: Correction) -> Vec<f64> {
    let m = p.len() as f64;
    match correction {
        Correction::Bonferroni => p.iter().map(|v| (v * m).min(1.0)).collect(),
        Correction::BenjaminiHochberg => {
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
            let mut adjusted = vec![0.0; p.len()];
            let mut running = 1.0_f64;
            for (rank, &i) in order.iter().enumerate().rev() {
                // m / rank >= 1 first, so rounding never drops below p
                running = running.min(p[i] * (m / (rank + 1) as f64));
                adjusted[i] = running.min(1.0);
            }
            adjusted
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseResult {
    pub first: String,
    pub second: String,
    pub statistic: f64,
    pub p_value: f64,
    pub adjusted_p_value: f64,
    pub reject: bool,
}

/// Wald tests of psi_j = psi_k for every pair j < k:
/// n (psi_j - psi_k)^2 / (Sigma_jj + Sigma_kk - 2 Sigma_jk) against chi^2_1.
/// A pair with zero contrast variance gets statistic 0 when its effects
/// agree and is an error otherwise.
pub fn pairwise_tests(
    psi: &[f64],
    sigma: &SymmetricMatrix,
    n: usize,
    labels: &[String],
    correction: Correction,
    alpha: f64,
) -> Result<Vec<PairwiseResult>> {
    let k = psi.len();
    if k < 2 || sigma.dim() != k || labels.len() != k {
        return Err(Error::InvalidArgument("pairwise tests need K >= 2 matching effects, covariance and labels".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let mut raw = Vec::new();
    for j in 0..k {
        for l in (j + 1)..k {
            let var = sigma.get(j, j) + sigma.get(l, l) - 2.0 * sigma.get(j, l);
            let d = psi[j] - psi[l];
            let statistic = if var > 1e-14 * (sigma.get(j, j) + sigma.get(l, l)).max(f64::MIN_POSITIVE) {
                n as f64 * d * d / var
            } else if d.abs() <= 1e-10 * psi[j].abs().max(psi[l].abs()).max(1.0) {
                // identical outcomes: nothing to test
                0.0
            } else {
                return Err(Error::ZeroContrastVariance(labels[j].clone(), labels[l].clone()));
            };
            raw.push((j, l, statistic, chisq_upper_tail(statistic, 1.0)?));
        }
    }
    let p: Vec<f64> = raw.iter().map(|r| r.3).collect();
    let adjusted = adjust_p_values(&p, correction);
    Ok(raw
        .into_iter()
        .zip(adjusted)
        .map(|((j, l, statistic, p_value), adjusted_p_value)| PairwiseResult {
            first: labels[j].clone(),
            second: labels[l].clone(),
            statistic,
            p_value,
            adjusted_p_value,
            reject: adjusted_p_value <= alpha,
        })
        .collect())
}
