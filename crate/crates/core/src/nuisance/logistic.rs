use nalgebra::{DMatrix, DVector};

use super::linear::{FitResult, Standardized, RIDGE_PENALTY};
use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 100;
pub const SCORE_TOLERANCE: f64 = 1e-8;
/// Fitted probabilities this close to 0 or 1 signal (quasi-)separation.
const SEPARATION_EPS: f64 = 1e-8;

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn deviance(y: &[f64], eta: &DVector<f64>) -> f64 {
    // -2 loglik, written to stay finite for large |eta|
    2.0 * y
        .iter()
        .zip(eta.iter())
        .map(|(&yi, &e)| {
            let log1p_exp = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            log1p_exp - yi * e
        })
        .sum::<f64>()
}

/// Logistic regression with intercept by iteratively reweighted least squares.
///
/// Newton steps on the standardized design until the largest absolute score
/// component drops below 1e-8, capped at 100 iterations. When fitted
/// probabilities collapse onto 0 or 1 the data are (quasi-)separated: the fit
/// keeps iterating to the cap and reports `converged = false`.
pub fn fit_logistic(design: &DMatrix<f64>, response: &[f64]) -> Result<FitResult> {
    let (n, q) = design.shape();
    if response.len() != n {
        return Err(Error::InvalidArgument(format!(
            "response has {} values for {n} design rows",
            response.len()
        )));
    }
    if response.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidArgument("logistic response must be 0/1".into()));
    }
    let ones = response.iter().filter(|&&y| y == 1.0).count();
    if ones == 0 || ones == n {
        return Err(Error::SingleClass);
    }
    let std = Standardized::new(design)?;
    let z = &std.z;
    let y = DVector::from_column_slice(response);

    let mut beta = DVector::zeros(q + 1);
    let mean = ones as f64 / n as f64;
    beta[0] = (mean / (1.0 - mean)).ln();
    let mut eta = z * &beta;
    let mut dev = deviance(response, &eta);
    let mut converged = false;
    let mut separated = false;
    let mut iterations = 0;
    let mut used_ridge = false;

    while iterations < MAX_ITERATIONS {
        let p: DVector<f64> = eta.map(expit);
        let resid = &y - &p;
        let score = z.tr_mul(&resid);
        let max_score = score.amax();
        separated = p.iter().any(|&pi| pi < SEPARATION_EPS || pi > 1.0 - SEPARATION_EPS);
        if max_score < SCORE_TOLERANCE && !separated {
            converged = true;
            break;
        }
        iterations += 1;

        let w: DVector<f64> = p.map(|pi| pi * (1.0 - pi));
        let zw = DMatrix::from_fn(n, q + 1, |i, j| z[(i, j)] * w[i]);
        let mut info = zw.tr_mul(z);
        let step = match info.clone().cholesky() {
            Some(c) => c.solve(&score),
            None => {
                used_ridge = true;
                for j in 0..=q {
                    info[(j, j)] += RIDGE_PENALTY * n as f64;
                }
                match info.cholesky() {
                    Some(c) => c.solve(&score),
                    None => break,
                }
            }
        };
        if !step.iter().all(|s| s.is_finite()) {
            break;
        }

        // step halving guards against deviance increases far from the optimum
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let candidate = &beta + &step * scale;
            let cand_eta = z * &candidate;
            let cand_dev = deviance(response, &cand_eta);
            if cand_dev.is_finite() && cand_dev <= dev + 1e-12 * dev.abs().max(1.0) {
                beta = candidate;
                eta = cand_eta;
                dev = cand_dev;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        let step_size = step.amax() * scale;
        if !accepted || step_size <= 1e-14 * (1.0 + beta.amax()) {
            // numerical fixed point: the score cannot be reduced further
            let p: DVector<f64> = eta.map(expit);
            separated = p.iter().any(|&pi| pi < SEPARATION_EPS || pi > 1.0 - SEPARATION_EPS);
            converged = !separated && z.tr_mul(&(&y - &p)).amax() < 1e-6;
            break;
        }
    }

    Ok(FitResult {
        coefficients: std.unscale(&beta),
        converged: converged && !separated,
        iterations,
        deviance: dev,
        ridge: used_ridge,
    })
}

/// Fitted probabilities expit(b0 + X b).
pub fn predict_probability(fit: &FitResult, design: &DMatrix<f64>) -> Vec<f64> {
    fit.linear_predictor(design).into_iter().map(expit).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intercept_only_mle_is_sample_mean() {
        let x = DMatrix::<f64>::zeros(4, 0);
        let fit = fit_logistic(&x, &[1.0, 1.0, 0.0, 1.0]).unwrap();
        assert!(fit.converged);
        assert!((expit(fit.coefficients[0]) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn separation_is_flagged() {
        let x = DMatrix::from_column_slice(4, 1, &[-2.0, -1.0, 1.0, 2.0]);
        let fit = fit_logistic(&x, &[0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(!fit.converged);
        assert!(fit.coefficients[1] > 5.0);
    }

    #[test]
    fn single_class_is_an_error() {
        let x = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        assert!(matches!(fit_logistic(&x, &[1.0, 1.0, 1.0]), Err(Error::SingleClass)));
    }

    #[test]
    fn overlapping_classes_converge() {
        let x = DMatrix::from_column_slice(6, 1, &[-2.0, -1.0, 0.0, 0.5, 1.0, 2.0]);
        let y = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let fit = fit_logistic(&x, &y).unwrap();
        assert!(fit.converged);
        let p = predict_probability(&fit, &x);
        // score equations: sum(y - p) = 0 and sum x (y - p) = 0
        let s0: f64 = y.iter().zip(&p).map(|(a, b)| a - b).sum();
        let s1: f64 = (0..6).map(|i| x[(i, 0)] * (y[i] - p[i])).sum();
        assert!(s0.abs() < 1e-8 && s1.abs() < 1e-8);
    }
}
