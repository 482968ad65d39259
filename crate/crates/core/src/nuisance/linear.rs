use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative QR pivot below which a linear fit switches to ridge.
const RIDGE_TRIGGER: f64 = 1e-10;
/// Relative QR pivot below which columns are reported as exactly collinear.
const COLLINEAR: f64 = 1e-14;
/// Ridge penalty on standardized non-intercept coefficients, per unit.
pub const RIDGE_PENALTY: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Intercept first, then one coefficient per design column, on the
    /// original column scale.
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Residual sum of squares (linear) or deviance (logistic).
    pub deviance: f64,
    /// True when the ridge fallback was used.
    pub ridge: bool,
}

impl FitResult {
    /// Linear predictor b0 + X b for each row of `design`.
    pub fn linear_predictor(&self, design: &DMatrix<f64>) -> Vec<f64> {
        let slopes = &self.coefficients[1..];
        (0..design.nrows())
            .map(|i| {
                self.coefficients[0]
                    + slopes.iter().enumerate().map(|(j, b)| b * design[(i, j)]).sum::<f64>()
            })
            .collect()
    }
}

/// Column centering and scaling; the fit runs on [1, (X - m) / s].
pub(crate) struct Standardized {
    pub z: DMatrix<f64>,
    means: Vec<f64>,
    scales: Vec<f64>,
}

impl Standardized {
    /// Fails on zero-variance columns, which are collinear with the intercept.
    pub fn new(design: &DMatrix<f64>) -> Result<Self> {
        let (n, q) = design.shape();
        let mut means = Vec::with_capacity(q);
        let mut scales = Vec::with_capacity(q);
        let mut flat = Vec::new();
        for j in 0..q {
            let col = design.column(j);
            let m = col.sum() / n as f64;
            let s = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
            if !(s > 0.0) || s < 1e-300 || s <= 1e-14 * m.abs() {
                flat.push(format!("column {}", j + 1));
            }
            means.push(m);
            scales.push(s);
        }
        if !flat.is_empty() {
            return Err(Error::RankDeficient(flat));
        }
        let z = DMatrix::from_fn(n, q + 1, |i, j| {
            if j == 0 {
                1.0
            } else {
                (design[(i, j - 1)] - means[j - 1]) / scales[j - 1]
            }
        });
        Ok(Self { z, means, scales })
    }

    /// Maps standardized coefficients back to the original column scale.
    pub fn unscale(&self, b: &DVector<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(b.len());
        let mut intercept = b[0];
        let slopes: Vec<f64> = (1..b.len())
            .map(|j| {
                let s = b[j] / self.scales[j - 1];
                intercept -= s * self.means[j - 1];
                s
            })
            .collect();
        out.push(intercept);
        out.extend(slopes);
        out
    }
}

/// Solves (Z'WZ + penalty on non-intercept terms) b = Z'W y via normal equations.
pub(crate) fn ridge_solve(z: &DMatrix<f64>, y: &DVector<f64>, w: Option<&DVector<f64>>) -> Result<DVector<f64>> {
    let (n, q) = z.shape();
    let zw = match w {
        Some(w) => DMatrix::from_fn(n, q, |i, j| z[(i, j)] * w[i]),
        None => z.clone(),
    };
    let mut gram = zw.tr_mul(z);
    for j in 1..q {
        gram[(j, j)] += RIDGE_PENALTY * n as f64;
    }
    let rhs = zw.tr_mul(y);
    gram.cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::Singular("ridge normal equations".into()))
}

/// Least squares with intercept: minimizes sum_i w_i (y_i - b0 - x_i'b)^2.
///
/// Householder QR on the standardized design; falls back to ridge
/// (penalty 1e-8 per unit on standardized slopes) when the smallest QR pivot
/// is below 1e-10 of the largest, and fails on exact collinearity.
pub fn fit_linear(
    design: &DMatrix<f64>,
    response: &[f64],
    weights: Option<&[f64]>,
) -> Result<FitResult> {
    let (n, q) = design.shape();
    if response.len() != n {
        return Err(Error::InvalidArgument(format!(
            "response has {} values for {n} design rows",
            response.len()
        )));
    }
    if n <= q {
        return Err(Error::InvalidArgument(format!(
            "linear fit needs more rows than columns ({n} rows, {q} columns)"
        )));
    }
    if let Some(w) = weights {
        if w.len() != n || w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("weights must be n finite nonnegative values".into()));
        }
    }
    let std = Standardized::new(design)?;
    let sqrt_w: Option<DVector<f64>> = weights.map(|w| DVector::from_iterator(n, w.iter().map(|v| v.sqrt())));
    let (zw, yw) = match &sqrt_w {
        Some(sw) => (
            DMatrix::from_fn(n, q + 1, |i, j| std.z[(i, j)] * sw[i]),
            DVector::from_iterator(n, response.iter().zip(sw.iter()).map(|(y, s)| y * s)),
        ),
        None => (std.z.clone(), DVector::from_column_slice(response)),
    };

    let qr = zw.qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..=q).map(|j| r[(j, j)].abs()).collect();
    let max_pivot = diag.iter().cloned().fold(0.0, f64::max);
    let collinear: Vec<String> = diag
        .iter()
        .enumerate()
        .filter(|(_, d)| **d <= COLLINEAR * max_pivot)
        .map(|(j, _)| if j == 0 { "intercept".to_string() } else { format!("column {j}") })
        .collect();
    if !collinear.is_empty() {
        return Err(Error::RankDeficient(collinear));
    }
    let needs_ridge = diag.iter().any(|d| *d < RIDGE_TRIGGER * max_pivot);

    let b = if needs_ridge {
        let w2 = weights.map(|w| DVector::from_column_slice(w));
        ridge_solve(&std.z, &DVector::from_column_slice(response), w2.as_ref())?
    } else {
        let mut qty = yw.clone();
        qr.q_tr_mul(&mut qty);
        let top = qty.rows(0, q + 1).into_owned();
        r.solve_upper_triangular(&top)
            .ok_or_else(|| Error::Singular("triangular solve".into()))?
    };
    let fitted = &std.z * &b;
    let rss = (0..n)
        .map(|i| {
            let e = response[i] - fitted[i];
            weights.map_or(1.0, |w| w[i]) * e * e
        })
        .sum();
    Ok(FitResult {
        coefficients: std.unscale(&b),
        converged: true,
        iterations: 1,
        deviance: rss,
        ridge: needs_ridge,
    })
}
