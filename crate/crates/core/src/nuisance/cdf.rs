use nalgebra::DMatrix;

use super::logistic::{fit_logistic, predict_probability};
use crate::error::{Error, Result};
use crate::model::{monotonize_rows, FitDiagnostic};

/// Default number of pooled empirical quantiles used as CDF thresholds.
pub const DEFAULT_GRID_POINTS: usize = 101;

/// `points` empirical quantiles of `values` at levels 0, 1/(points-1), ..., 1
/// (order statistics at rounded positions), deduplicated. Always contains the
/// minimum and maximum.
pub fn quantile_grid(values: &[f64], points: usize) -> Result<Vec<f64>> {
    if values.is_empty() || points < 2 {
        return Err(Error::InvalidArgument(
            "quantile grid needs data and at least 2 points".into(),
        ));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let last = sorted.len() - 1;
    let mut grid: Vec<f64> = (0..points)
        .map(|i| {
            let pos = (i as f64 / (points - 1) as f64 * last as f64).round() as usize;
            sorted[pos.min(last)]
        })
        .collect();
    grid.dedup();
    Ok(grid)
}

/// Per-unit CDF predictions nu(y | X_i, a) for every threshold in `grid`.
///
/// For each y, regresses 1(Y <= y) on the features by logistic regression
/// within the `train` units of arm `arm`, then predicts for the `predict`
/// design. Thresholds where the indicator is constant in the arm give the
/// constant 0 or 1. Rows are monotonized along the grid.
pub(crate) fn fit_cdf_rows(
    train_design: &DMatrix<f64>,
    train_outcome: &[f64],
    predict_design: &DMatrix<f64>,
    grid: &[f64],
    diagnostics: &mut Vec<FitDiagnostic>,
    label: &str,
    fold: Option<usize>,
) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(predict_design.nrows(), grid.len());
    for (g, &y) in grid.iter().enumerate() {
        let indicator: Vec<f64> = train_outcome.iter().map(|&v| f64::from(u8::from(v <= y))).collect();
        let ones = indicator.iter().filter(|&&v| v == 1.0).count();
        if ones == 0 {
            continue;
        }
        if ones == indicator.len() {
            out.column_mut(g).fill(1.0);
            continue;
        }
        let fit = fit_logistic(train_design, &indicator)?;
        if !fit.converged {
            diagnostics.push(FitDiagnostic {
                target: format!("{label} at y={y}"),
                fold,
                converged: false,
                iterations: fit.iterations,
            });
        }
        for (i, p) in predict_probability(&fit, predict_design).into_iter().enumerate() {
            out[(i, g)] = p;
        }
    }
    monotonize_rows(&mut out);
    Ok(out)
}
