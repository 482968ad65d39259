//! Distribution functions, small dense linear algebra and seeded random streams.

mod linalg;
mod rng;
mod special;

pub use linalg::{
    empirical_covariance, pseudo_inverse, solve_spd, spd_inverse, SpdSolution, SymmetricMatrix,
    PINV_RELATIVE_THRESHOLD,
};
pub use rng::{seeded_rng, StreamRng};
pub use special::{
    chisq_upper_tail, ln_gamma, normal_cdf, normal_pdf, normal_quantile, normal_sf,
    regularized_gamma,
};

/// Mean of a slice; NaN for an empty slice.
pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
