//! Simulation study: the four-outcome data-generating process, the
//! correct/misspecified nuisance scenarios, replication and summaries, plus
//! small DGPs with known nuisances used to check estimators.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::estimate_scaled_effects;
use crate::mathkit::{normal_cdf, normal_quantile, seeded_rng, StreamRng};
use crate::model::Dataset;
use crate::nuisance::{expit, fit_nuisances, FitOptions, ModelSpec, NuisanceOracle, Target, DEFAULT_CLIP};
use crate::testing::{homogeneity_test, CovarianceSource};

pub const K: usize = 4;

/// Which nuisance blocks are fitted on the true covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Correct {
    /// Propensity and outcome models both correct.
    Both,
    /// Only the propensity ("treatment") model is correct.
    Trt,
    /// Only the outcome models are correct.
    Out,
    None,
}

impl Correct {
    pub const ALL: [Correct; 4] = [Correct::Both, Correct::Trt, Correct::Out, Correct::None];

    pub fn propensity_correct(self) -> bool {
        matches!(self, Correct::Both | Correct::Trt)
    }

    pub fn outcome_correct(self) -> bool {
        matches!(self, Correct::Both | Correct::Out)
    }
}

impl fmt::Display for Correct {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Correct::Both => "both",
            Correct::Trt => "trt",
            Correct::Out => "out",
            Correct::None => "none",
        })
    }
}

impl FromStr for Correct {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "both" => Ok(Correct::Both),
            "trt" => Ok(Correct::Trt),
            "out" => Ok(Correct::Out),
            "none" => Ok(Correct::None),
            other => Err(Error::InvalidArgument(format!(
                "unknown scenario `{other}` (expected both, trt, out or none)"
            ))),
        }
    }
}

/// Linear part of mu_k without the factor k.
fn signed_sum(x: &[f64], k: usize) -> f64 {
    match k {
        0 => x[1] - x[2] + x[3],
        1 => x[0] + x[2] - x[3],
        2 => -x[0] + x[1] + x[3],
        _ => x[0] - x[1] + x[2],
    }
}

/// pi(1 | x) = expit((2 x1 - 4 x2 + 2 x3 - x4) / 4).
pub fn true_propensity(x: &[f64]) -> f64 {
    expit((2.0 * x[0] - 4.0 * x[1] + 2.0 * x[2] - x[3]) / 4.0)
}

/// mu_k(x, a) for outcome index k (0-based; the multiplier is k + 1).
pub fn true_mean(x: &[f64], a: u8, k: usize, lambda: f64) -> f64 {
    let kk = (k + 1) as f64;
    kk * signed_sum(x, k) + 2.0 * (kk - lambda) * a as f64
}

/// psi_k = (k - lambda) / k.
pub fn true_psi(lambda: f64) -> Vec<f64> {
    (1..=K).map(|k| (k as f64 - lambda) / k as f64).collect()
}

/// n units: X ~ N(0, I_4), A | X ~ Bernoulli(pi(1|X)),
/// Y_k | X, A ~ N(mu_k(X, A), k^2).
pub fn generate_dataset(n: usize, lambda: f64, rng: &mut StreamRng) -> Result<Dataset> {
    let mut x = DMatrix::zeros(n, K);
    let mut a = Vec::with_capacity(n);
    let mut y = DMatrix::zeros(n, K);
    for i in 0..n {
        let row: [f64; K] = std::array::from_fn(|_| rng.normal());
        let ai = u8::from(rng.bernoulli(true_propensity(&row)));
        for k in 0..K {
            x[(i, k)] = row[k];
            y[(i, k)] = true_mean(&row, ai, k, lambda) + (k + 1) as f64 * rng.normal();
        }
        a.push(ai as f64);
    }
    Dataset::new(x, names("x", K), a, y, names("y", K))
}

fn names(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|j| format!("{prefix}{j}")).collect()
}

/// Kang-Schafer transforms: (exp(x1/2), 10 + x2/(1 + exp(x1)),
/// (0.6 + x1 x3 / 25)^3, (x2 + x4 + 20)^2).
pub fn misspecify_covariates(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != K {
        return Err(Error::InvalidArgument(format!("expected 4 covariate columns, got {}", x.ncols())));
    }
    Ok(DMatrix::from_fn(x.nrows(), K, |i, j| {
        let (x1, x2, x3, x4) = (x[(i, 0)], x[(i, 1)], x[(i, 2)], x[(i, 3)]);
        match j {
            0 => (x1 / 2.0).exp(),
            1 => 10.0 + x2 / (1.0 + x1.exp()),
            2 => (0.6 + x1 * x3 / 25.0).powi(3),
            _ => (x2 + x4 + 20.0).powi(2),
        }
    }))
}

/// Design blocks for the three nuisance types.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub propensity: DMatrix<f64>,
    pub mean: DMatrix<f64>,
    /// Mean features, their squares and pairwise products (14 columns).
    pub second_moment: DMatrix<f64>,
}

/// Quadratic expansion: the columns, their squares, then all pairwise
/// products in (1,2), (1,3), ..., (p-1,p) order.
pub fn quadratic_expansion(m: &DMatrix<f64>) -> DMatrix<f64> {
    let p = m.ncols();
    let pairs: Vec<(usize, usize)> = (0..p).flat_map(|i| ((i + 1)..p).map(move |j| (i, j))).collect();
    DMatrix::from_fn(m.nrows(), 2 * p + pairs.len(), |r, c| {
        if c < p {
            m[(r, c)]
        } else if c < 2 * p {
            m[(r, c - p)].powi(2)
        } else {
            let (i, j) = pairs[c - 2 * p];
            m[(r, i)] * m[(r, j)]
        }
    })
}

/// Column names matching [`quadratic_expansion`].
pub fn quadratic_names(base: &[String]) -> Vec<String> {
    let p = base.len();
    let mut out = base.to_vec();
    out.extend(base.iter().map(|b| format!("{b}^2")));
    for i in 0..p {
        for j in (i + 1)..p {
            out.push(format!("{}*{}", base[i], base[j]));
        }
    }
    out
}

pub fn build_features(x_true: &DMatrix<f64>, x_miss: &DMatrix<f64>, correct: Correct) -> Features {
    let propensity = if correct.propensity_correct() { x_true } else { x_miss }.clone();
    let mean = if correct.outcome_correct() { x_true } else { x_miss }.clone();
    let second_moment = quadratic_expansion(&mean);
    Features { propensity, mean, second_moment }
}

/// Dataset whose covariates are the scenario's feature blocks (propensity
/// columns g1..g4, mean columns m1..m4 and their quadratic terms), with the
/// matching model specs.
pub fn scenario_dataset(data: &Dataset, correct: Correct) -> Result<(Dataset, Vec<ModelSpec>)> {
    let x = data.covariates();
    let f = build_features(x, &misspecify_covariates(x)?, correct);
    let g = names("g", K);
    let m = names("m", K);
    let q = quadratic_names(&m);
    let extra = &q[K..];
    let n = data.n();
    let cols = 2 * K + extra.len();
    let covariates = DMatrix::from_fn(n, cols, |i, j| {
        if j < K {
            f.propensity[(i, j)]
        } else {
            f.second_moment[(i, j - K)]
        }
    });
    let mut names_all = g.clone();
    names_all.extend(q.iter().cloned());
    let treatment = data.treatment().iter().map(|&a| a as f64).collect();
    let ds = Dataset::new(covariates, names_all, treatment, data.outcomes().clone(), data.outcome_names().to_vec())?;
    let mut specs = vec![ModelSpec::new(Target::Propensity, g)];
    for k in 0..data.k() {
        specs.push(ModelSpec::new(Target::OutcomeMean(k), m.clone()));
        specs.push(ModelSpec::new(Target::SecondMoment(k), q.clone()));
    }
    Ok((ds, specs))
}

/// Known nuisances of the four-outcome DGP, evaluated on (x1, x2, x3, x4).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOracle {
    pub lambda: f64,
}

impl NuisanceOracle for SimOracle {
    fn propensity(&self, x: &[f64]) -> f64 {
        true_propensity(x)
    }
    fn outcome_mean(&self, x: &[f64], a: u8, k: usize) -> f64 {
        true_mean(x, a, k, self.lambda)
    }
    fn second_moment(&self, x: &[f64], k: usize) -> f64 {
        let m = true_mean(x, 0, k, self.lambda);
        let sd = (k + 1) as f64;
        m * m + sd * sd
    }
    fn cdf(&self, y: f64, x: &[f64], a: u8, k: usize) -> Option<f64> {
        Some(normal_cdf((y - true_mean(x, a, k, self.lambda)) / (k + 1) as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub n: usize,
    pub n_sim: usize,
    pub lambda: f64,
    pub correct: Correct,
    pub master_seed: u64,
    pub alpha: f64,
    pub clip: f64,
}

impl SimScenario {
    pub fn new(n: usize, n_sim: usize, lambda: f64, correct: Correct, master_seed: u64) -> Self {
        Self { n, n_sim, lambda, correct, master_seed, alpha: 0.05, clip: DEFAULT_CLIP }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub index: usize,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub outcome: String,
    pub truth: f64,
    pub bias: f64,
    /// Standard deviation of the estimates (divisor n_sim - 1).
    pub sd: f64,
    pub median_se: f64,
    /// sqrt(n * mean((estimate - truth)^2)).
    pub rmse: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub scenario: SimScenario,
    pub outcomes: Vec<OutcomeSummary>,
    /// Share of replicates whose homogeneity p-value is at most alpha.
    pub rejection_rate: f64,
    pub completed: usize,
    pub excluded: usize,
    pub replicates: Vec<ReplicateRecord>,
}

/// One replicate: simulate, fit the scenario's nuisance models, estimate and test.
pub fn run_replicate(scenario: &SimScenario, index: usize) -> Result<ReplicateRecord> {
    let mut rng = seeded_rng(scenario.master_seed, index as u64);
    let data = generate_dataset(scenario.n, scenario.lambda, &mut rng)?;
    let (ds, specs) = scenario_dataset(&data, scenario.correct)?;
    let options = FitOptions { clip: scenario.clip, ..FitOptions::default() };
    let fits = fit_nuisances(&ds, &specs, &options)?;
    let effects = estimate_scaled_effects(&ds, &fits, scenario.alpha)?;
    let test = homogeneity_test(&effects.table.estimates, &effects.table.covariance, ds.n(), CovarianceSource::ClosedForm)?;
    Ok(ReplicateRecord {
        index,
        estimates: effects.table.estimates,
        std_errors: effects.table.std_errors,
        p_value: test.p_value,
    })
}

/// Runs every replicate on its own random stream (in parallel; results do
/// not depend on scheduling) and summarizes them against the true effects.
/// Failed replicates are excluded and counted; more than 1% failing is an error.
pub fn run_replications(scenario: &SimScenario) -> Result<SimSummary> {
    if scenario.n_sim == 0 {
        return Err(Error::InvalidArgument("need at least one replicate".into()));
    }
    let results: Vec<Result<ReplicateRecord>> =
        (0..scenario.n_sim).into_par_iter().map(|r| run_replicate(scenario, r)).collect();
    let mut replicates = Vec::with_capacity(scenario.n_sim);
    let mut excluded = 0;
    for r in results {
        match r {
            Ok(rec) => replicates.push(rec),
            Err(_) => excluded += 1,
        }
    }
    if excluded as f64 > 0.01 * scenario.n_sim as f64 || replicates.is_empty() {
        return Err(Error::ReplicateFailures { failed: excluded, total: scenario.n_sim });
    }
    summarize(scenario.clone(), replicates, excluded)
}

/// Aggregates replicate records: bias = mean(est) - psi, sd with divisor
/// R - 1, median SE, sqrt(n) RMSE, coverage of est -/+ z SE (strict), and
/// the homogeneity rejection rate.
pub fn summarize(scenario: SimScenario, replicates: Vec<ReplicateRecord>, excluded: usize) -> Result<SimSummary> {
    let psi = true_psi(scenario.lambda);
    let z = normal_quantile(1.0 - scenario.alpha / 2.0)?;
    let r = replicates.len() as f64;
    let outcomes = (0..K)
        .map(|k| {
            let est: Vec<f64> = replicates.iter().map(|rec| rec.estimates[k]).collect();
            let mut se: Vec<f64> = replicates.iter().map(|rec| rec.std_errors[k]).collect();
            let mean = est.iter().sum::<f64>() / r;
            let sd = if est.len() > 1 {
                (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt()
            } else {
                f64::NAN
            };
            se.sort_by(f64::total_cmp);
            let mid = se.len() / 2;
            let median_se = if se.len() % 2 == 1 { se[mid] } else { 0.5 * (se[mid - 1] + se[mid]) };
            let mse = est.iter().map(|e| (e - psi[k]).powi(2)).sum::<f64>() / r;
            let covered = replicates
                .iter()
                .filter(|rec| {
                    let (e, s) = (rec.estimates[k], rec.std_errors[k]);
                    e - z * s < psi[k] && psi[k] < e + z * s
                })
                .count();
            OutcomeSummary {
                outcome: format!("y{}", k + 1),
                truth: psi[k],
                bias: mean - psi[k],
                sd,
                median_se,
                rmse: (scenario.n as f64 * mse).sqrt(),
                coverage: covered as f64 / r,
            }
        })
        .collect();
    let rejection_rate = replicates.iter().filter(|rec| rec.p_value <= scenario.alpha).count() as f64 / r;
    Ok(SimSummary {
        scenario,
        outcomes,
        rejection_rate,
        completed: replicates.len(),
        excluded,
        replicates,
    })
}

/// One cell (x, v) of a fully discrete DGP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteCell {
    pub x: f64,
    pub v: f64,
    /// P(X = x, V = v).
    pub probability: f64,
    /// P(A = 1 | x, v).
    pub propensity: f64,
    /// Per outcome, per arm: probabilities over the support.
    pub outcome: Vec<[Vec<f64>; 2]>,
}

/// Discrete DGP over covariates (x, v), binary treatment and outcomes on a
/// finite support, with exact nuisance functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDgp {
    pub support: Vec<f64>,
    pub cells: Vec<DiscreteCell>,
}

impl DiscreteDgp {
    /// Binary x, stratum v in {1, 2}, two outcomes on {0, 1, 2}. Effects
    /// differ by outcome and stratum, and treatment depends on (x, v).
    pub fn example() -> Self {
        let cell = |x: f64, v: f64, probability: f64, propensity: f64, outcome: Vec<[Vec<f64>; 2]>| DiscreteCell {
            x,
            v,
            probability,
            propensity,
            outcome,
        };
        Self {
            support: vec![0.0, 1.0, 2.0],
            cells: vec![
                cell(0.0, 1.0, 0.3, 0.3, vec![
                    [vec![0.5, 0.3, 0.2], vec![0.2, 0.4, 0.4]],
                    [vec![0.4, 0.4, 0.2], vec![0.3, 0.4, 0.3]],
                ]),
                cell(1.0, 1.0, 0.2, 0.6, vec![
                    [vec![0.3, 0.4, 0.3], vec![0.1, 0.3, 0.6]],
                    [vec![0.6, 0.2, 0.2], vec![0.5, 0.3, 0.2]],
                ]),
                cell(0.0, 2.0, 0.25, 0.5, vec![
                    [vec![0.6, 0.3, 0.1], vec![0.6, 0.2, 0.2]],
                    [vec![0.5, 0.3, 0.2], vec![0.2, 0.3, 0.5]],
                ]),
                cell(1.0, 2.0, 0.25, 0.4, vec![
                    [vec![0.2, 0.5, 0.3], vec![0.2, 0.4, 0.4]],
                    [vec![0.3, 0.5, 0.2], vec![0.1, 0.3, 0.6]],
                ]),
            ],
        }
    }

    pub fn k(&self) -> usize {
        self.cells.first().map_or(0, |c| c.outcome.len())
    }

    fn cell_of(&self, x: &[f64]) -> &DiscreteCell {
        self.cells
            .iter()
            .find(|c| c.x == x[0] && c.v == x[1])
            .expect("covariates outside the DGP support")
    }

    fn draw_index(probabilities: impl Iterator<Item = f64>, u: f64) -> usize {
        let mut acc = 0.0;
        let mut last = 0;
        for (i, p) in probabilities.enumerate() {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
        last
    }

    /// n draws; covariates are named `x` and `v`, outcomes y1..yK.
    pub fn sample(&self, n: usize, rng: &mut StreamRng) -> Result<Dataset> {
        let k = self.k();
        let mut cov = DMatrix::zeros(n, 2);
        let mut a = Vec::with_capacity(n);
        let mut y = DMatrix::zeros(n, k);
        for i in 0..n {
            let c = &self.cells[Self::draw_index(self.cells.iter().map(|c| c.probability), rng.uniform())];
            let ai = u8::from(rng.bernoulli(c.propensity));
            cov[(i, 0)] = c.x;
            cov[(i, 1)] = c.v;
            for j in 0..k {
                let dist = &c.outcome[j][ai as usize];
                y[(i, j)] = self.support[Self::draw_index(dist.iter().copied(), rng.uniform())];
            }
            a.push(ai as f64);
        }
        Dataset::new(cov, vec!["x".into(), "v".into()], a, y, names("y", k))
    }
}

impl NuisanceOracle for DiscreteDgp {
    fn propensity(&self, x: &[f64]) -> f64 {
        self.cell_of(x).propensity
    }
    fn outcome_mean(&self, x: &[f64], a: u8, k: usize) -> f64 {
        let dist = &self.cell_of(x).outcome[k][a as usize];
        self.support.iter().zip(dist).map(|(y, p)| y * p).sum()
    }
    fn second_moment(&self, x: &[f64], k: usize) -> f64 {
        let dist = &self.cell_of(x).outcome[k][0];
        self.support.iter().zip(dist).map(|(y, p)| y * y * p).sum()
    }
    fn cdf(&self, y: f64, x: &[f64], a: u8, k: usize) -> Option<f64> {
        let dist = &self.cell_of(x).outcome[k][a as usize];
        Some(self.support.iter().zip(dist).filter(|(s, _)| **s <= y).map(|(_, p)| p).sum())
    }
}

/// Randomized trial with one irrelevant N(0, 1) covariate `x`,
/// P(A = 1) = 1/2, Y = Z + delta A and Z ~ N(0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocationShift {
    pub delta: f64,
}

impl LocationShift {
    pub fn sample(&self, n: usize, rng: &mut StreamRng) -> Result<Dataset> {
        let mut x = DMatrix::zeros(n, 1);
        let mut a = Vec::with_capacity(n);
        let mut y = DMatrix::zeros(n, 1);
        for i in 0..n {
            x[(i, 0)] = rng.normal();
            let ai = u8::from(rng.bernoulli(0.5));
            y[(i, 0)] = rng.normal() + self.delta * ai as f64;
            a.push(ai as f64);
        }
        Dataset::new(x, vec!["x".into()], a, y, vec!["y".into()])
    }
}

impl NuisanceOracle for LocationShift {
    fn propensity(&self, _x: &[f64]) -> f64 {
        0.5
    }
    fn outcome_mean(&self, _x: &[f64], a: u8, _k: usize) -> f64 {
        self.delta * a as f64
    }
    fn second_moment(&self, _x: &[f64], _k: usize) -> f64 {
        1.0
    }
    fn cdf(&self, y: f64, _x: &[f64], a: u8, _k: usize) -> Option<f64> {
        Some(normal_cdf(y - self.delta * a as f64))
    }
}
