use std::fmt::Write as _;

use serde::Serialize;

use scaledfx::model::FitDiagnostic;
use scaledfx::sim::SimSummary;
use scaledfx::testing::{Correction, CovarianceSource, PairwiseResult, TestResult};

/// Significant digits in the human-readable table.
pub const PRINTED_DIGITS: usize = 6;

/// One JSON document per invocation. Every key is always present; sections
/// that do not apply are null.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub command: String,
    pub config: serde_json::Value,
    pub estimand: Option<String>,
    pub estimates: Option<Vec<EstimateRow>>,
    pub covariance: Option<CovarianceBlock>,
    pub tests: Option<TestsBlock>,
    pub simulation: Option<SimSummary>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateRow {
    pub label: String,
    pub estimate: f64,
    pub std_error: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    /// Quantile effects only: treated median, control median, control
    /// upper and lower quartiles.
    pub quantiles: Option<[f64; 4]>,
}

/// Covariance of sqrt(n)(estimate - truth), rows in estimate order.
#[derive(Debug, Clone, Serialize)]
pub struct CovarianceBlock {
    pub source: CovarianceSource,
    pub labels: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TestsBlock {
    pub homogeneity: TestResult,
    pub correction: Correction,
    pub alpha: f64,
    pub pairwise: Vec<PairwiseResult>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Diagnostics {
    pub n: Option<usize>,
    pub n_treated: Option<usize>,
    pub n_control: Option<usize>,
    pub clip: Option<f64>,
    pub folds: Option<usize>,
    pub bootstrap_replicates: Option<usize>,
    pub bootstrap_failed: Option<usize>,
    pub pseudo_inverse: Option<bool>,
    pub nonconverged_fits: Vec<FitDiagnostic>,
    pub excluded_replicates: Option<usize>,
}

/// `%g`-style formatting with `digits` significant digits.
pub fn format_sig(x: f64, digits: usize) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".into();
    }
    let digits = digits.max(1);
    // the exponent after rounding, so 999999.5 prints as 1e+06
    let sci = format!("{:.*e}", digits - 1, x);
    let exp: i32 = sci[sci.find('e').unwrap() + 1..].parse().unwrap();
    if exp < -4 || exp >= digits as i32 {
        let (mantissa, _) = sci.split_once('e').unwrap();
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// NaN is printed as `-`, matching the null it becomes in JSON.
fn num(x: f64) -> String {
    if x.is_nan() {
        "-".into()
    } else {
        format_sig(x, PRINTED_DIGITS)
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_else(|| "-".into())
}

/// Left-aligned first column, right-aligned rest.
fn table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in width.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (j, (cell, w)) in cells.iter().zip(&width).enumerate() {
            if j == 0 {
                let _ = write!(s, "{cell:<w$}");
            } else {
                let _ = write!(s, "  {cell:>w$}");
            }
        }
        s.trim_end().to_string()
    };
    let _ = writeln!(out, "{}", line(header.to_vec()));
    for row in rows {
        let _ = writeln!(out, "{}", line(row.iter().map(String::as_str).collect()));
    }
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Aligned plain-text rendering of the same numbers.
    pub fn to_human(&self) -> String {
        let mut out = String::new();
        if let Some(e) = &self.estimand {
            let _ = writeln!(out, "{} ({e})", self.command);
        } else {
            let _ = writeln!(out, "{}", self.command);
        }
        if let Some(rows) = &self.estimates {
            out.push('\n');
            let with_q = rows.iter().any(|r| r.quantiles.is_some());
            let mut header = vec!["label", "estimate", "std.error", "ci.lower", "ci.upper"];
            if with_q {
                header.extend(["med.1", "med.0", "q75.0", "q25.0"]);
            }
            let body: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    let mut cells =
                        vec![r.label.clone(), num(r.estimate), opt(r.std_error), opt(r.ci_lower), opt(r.ci_upper)];
                    if with_q {
                        match r.quantiles {
                            Some(q) => cells.extend(q.iter().map(|&v| num(v))),
                            None => cells.extend(std::iter::repeat_n("-".to_string(), 4)),
                        }
                    }
                    cells
                })
                .collect();
            table(&mut out, &header, &body);
        }
        if let Some(cov) = &self.covariance {
            let _ = writeln!(out, "\ncovariance ({})", cov.source);
            let mut header = vec![""];
            header.extend(cov.labels.iter().map(String::as_str));
            let body: Vec<Vec<String>> = cov
                .labels
                .iter()
                .zip(&cov.matrix)
                .map(|(l, row)| std::iter::once(l.clone()).chain(row.iter().map(|&v| num(v))).collect())
                .collect();
            table(&mut out, &header, &body);
        }
        if let Some(t) = &self.tests {
            let h = &t.homogeneity;
            let _ = writeln!(
                out,
                "\nhomogeneity: T = {}, df = {}, p = {} ({} covariance{})",
                num(h.statistic),
                h.df,
                num(h.p_value),
                h.covariance_source,
                if h.pseudo_inverse { ", pseudo-inverse" } else { "" }
            );
            let _ = writeln!(out, "\npairwise ({}, alpha = {})", t.correction, num(t.alpha));
            let body: Vec<Vec<String>> = t
                .pairwise
                .iter()
                .map(|p| {
                    vec![
                        format!("{} - {}", p.first, p.second),
                        num(p.statistic),
                        num(p.p_value),
                        num(p.adjusted_p_value),
                        if p.reject { "yes" } else { "no" }.into(),
                    ]
                })
                .collect();
            table(&mut out, &["pair", "statistic", "p", "adjusted.p", "reject"], &body);
        }
        if let Some(sim) = &self.simulation {
            let s = &sim.scenario;
            let _ = writeln!(
                out,
                "\nscenario: n = {}, replicates = {}, lambda = {}, correct = {}, seed = {}",
                s.n,
                s.n_sim,
                num(s.lambda),
                s.correct,
                s.master_seed
            );
            let body: Vec<Vec<String>> = sim
                .outcomes
                .iter()
                .map(|o| {
                    vec![
                        o.outcome.clone(),
                        num(o.truth),
                        num(o.bias),
                        num(o.sd),
                        num(o.median_se),
                        num(o.rmse),
                        num(o.coverage),
                    ]
                })
                .collect();
            table(&mut out, &["outcome", "truth", "bias", "sd", "median.se", "rmse", "coverage"], &body);
            let _ = writeln!(
                out,
                "rejection rate {}; completed {}; excluded {}",
                num(sim.rejection_rate),
                sim.completed,
                sim.excluded
            );
        }
        let d = &self.diagnostics;
        let mut notes = Vec::new();
        if let (Some(n), Some(t), Some(c)) = (d.n, d.n_treated, d.n_control) {
            notes.push(format!("n = {n} ({t} treated, {c} control)"));
        }
        if let Some(clip) = d.clip {
            notes.push(format!("clip = {}", num(clip)));
        }
        if let Some(f) = d.folds {
            notes.push(format!("folds = {f}"));
        }
        if let Some(b) = d.bootstrap_replicates {
            notes.push(format!("bootstrap B = {b}, failed {}", d.bootstrap_failed.unwrap_or(0)));
        }
        if !d.nonconverged_fits.is_empty() {
            notes.push(format!("{} fits did not converge", d.nonconverged_fits.len()));
        }
        if !notes.is_empty() {
            let _ = writeln!(out, "\n{}", notes.join("; "));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig_formatting() {
        assert_eq!(format_sig(0.0, 6), "0");
        assert_eq!(format_sig(1.0, 6), "1");
        assert_eq!(format_sig(-1.0028374, 6), "-1.00284");
        assert_eq!(format_sig(123456.7, 6), "123457");
        assert_eq!(format_sig(1234567.0, 6), "1.23457e+06");
        assert_eq!(format_sig(999999.5, 6), "1e+06");
        assert_eq!(format_sig(0.0001234567, 6), "0.000123457");
        assert_eq!(format_sig(1.5375e-12, 6), "1.5375e-12");
        assert_eq!(format_sig(0.05, 6), "0.05");
        assert_eq!(format_sig(f64::NAN, 6), "NaN");
    }

    #[test]
    fn printed_values_parse_back_within_precision() {
        for &x in &[3.14159265358979, -2.718281828e-7, 6.02214076e23, 0.1 + 0.2] {
            let back: f64 = format_sig(x, 6).parse().unwrap();
            assert!(((back - x) / x).abs() < 5e-6, "{x}");
        }
    }
}
