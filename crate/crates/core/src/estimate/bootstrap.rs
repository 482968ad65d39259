use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathkit::{empirical_covariance, seeded_rng, SymmetricMatrix};
use crate::model::Dataset;

pub const MIN_REPLICATES: usize = 100;
/// Resamples with an empty arm are redrawn at most this many times.
pub const MAX_REDRAWS: usize = 10;
/// Share of failed replicates above which the bootstrap gives up.
pub const MAX_FAILURE_SHARE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// n times the empirical covariance of the replicate estimates.
    pub covariance: SymmetricMatrix,
    pub estimates: Vec<Vec<f64>>,
    /// Replicates whose estimator failed; they are excluded.
    pub failed: usize,
}

/// Row indices for replicate `b`, redrawn while an arm is empty.
pub fn resample_rows(dataset: &Dataset, seed: u64, b: usize) -> Result<Vec<usize>> {
    let n = dataset.n();
    let a = dataset.treatment();
    let mut rng = seeded_rng(seed, b as u64);
    for _ in 0..MAX_REDRAWS {
        let rows: Vec<usize> = (0..n).map(|_| rng.index(n)).collect();
        let treated = rows.iter().filter(|&&i| a[i] == 1).count();
        if treated > 0 && treated < n {
            return Ok(rows);
        }
    }
    Err(Error::EmptyArm(format!("bootstrap replicate {} after {MAX_REDRAWS} redraws", b + 1)))
}

/// Pairs bootstrap: resamples whole rows with replacement, reruns
/// `estimator` (which refits whatever it needs) and returns n times the
/// empirical covariance of the replicate estimates.
///
/// Replicate b draws from stream b of `seed`, so results do not depend on
/// thread scheduling.
pub fn bootstrap_covariance<F>(dataset: &Dataset, estimator: F, replicates: usize, seed: u64) -> Result<BootstrapResult>
where
    F: Fn(&Dataset) -> Result<Vec<f64>> + Sync,
{
    if replicates < MIN_REPLICATES {
        return Err(Error::InvalidArgument(format!(
            "bootstrap needs at least {MIN_REPLICATES} replicates, got {replicates}"
        )));
    }
    let outcomes: Vec<Result<Vec<f64>>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let rows = resample_rows(dataset, seed, b)?;
            estimator(&dataset.select_rows(&rows)?)
        })
        .collect();
    let mut estimates = Vec::with_capacity(replicates);
    let mut failed = 0;
    for r in outcomes {
        match r {
            Ok(v) => estimates.push(v),
            Err(e @ Error::EmptyArm(_)) => return Err(e),
            Err(_) => failed += 1,
        }
    }
    if failed as f64 > MAX_FAILURE_SHARE * replicates as f64 || estimates.len() < 2 {
        return Err(Error::ReplicateFailures { failed, total: replicates });
    }
    let dim = estimates[0].len();
    if estimates.iter().any(|e| e.len() != dim) {
        return Err(Error::InvalidArgument("replicate estimates differ in length".into()));
    }
    let m = nalgebra::DMatrix::from_fn(estimates.len(), dim, |i, j| estimates[i][j]);
    let covariance = empirical_covariance(&m)?.scaled(dataset.n() as f64);
    Ok(BootstrapResult { covariance, estimates, failed })
}
