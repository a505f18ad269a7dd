//! Simulated series and the experiment harness comparing exact and
//! approximate LFO-CV.

mod experiment;
mod report;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ar_trend::ArTrendSpec;
use crate::error::{Error, Result};
use crate::model::TimeSeries;
use crate::seed;

pub use experiment::{
    aggregate, run_experiment, CellSummary, ExperimentMatrix, ExperimentReport, Summary, TrialRecord,
};
pub use report::{histogram_csv, refit_table_csv, summarize_refits, RefitRow};

/// Data-generating process families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenKind {
    Constant,
    Linear,
    Quadratic,
    Ar2Only,
    Ar2Linear,
    Ar2Quadratic,
}

impl GenKind {
    pub const ALL: [GenKind; 6] = [
        GenKind::Constant,
        GenKind::Linear,
        GenKind::Quadratic,
        GenKind::Ar2Only,
        GenKind::Ar2Linear,
        GenKind::Ar2Quadratic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GenKind::Constant => "constant",
            GenKind::Linear => "linear",
            GenKind::Quadratic => "quadratic",
            GenKind::Ar2Only => "ar2-only",
            GenKind::Ar2Linear => "ar2-linear",
            GenKind::Ar2Quadratic => "ar2-quadratic",
        }
    }

    pub fn trend_degree(self) -> usize {
        match self {
            GenKind::Constant | GenKind::Ar2Only => 0,
            GenKind::Linear | GenKind::Ar2Linear => 1,
            GenKind::Quadratic | GenKind::Ar2Quadratic => 2,
        }
    }

    pub fn has_ar(self) -> bool {
        matches!(self, GenKind::Ar2Only | GenKind::Ar2Linear | GenKind::Ar2Quadratic)
    }

    /// The fitted model matching the generating process.
    pub fn fit_spec(self) -> ArTrendSpec {
        ArTrendSpec::new(if self.has_ar() { 2 } else { 0 }, self.trend_degree())
            .expect("valid built-in spec")
    }

    fn index(self) -> u64 {
        GenKind::ALL.iter().position(|k| *k == self).unwrap() as u64
    }
}

impl std::fmt::Display for GenKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Trend coefficients used when a kind includes the term.
pub const DEFAULT_B: [f64; 3] = [0.0, 17.0, 25.0];
/// AR coefficients used when a kind includes AR terms.
pub const DEFAULT_PHI: [f64; 2] = [0.5, 0.3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub kind: GenKind,
    /// `(b_0, b_1, b_2)`.
    pub b: [f64; 3],
    /// `(φ_1, φ_2)`.
    pub phi: [f64; 2],
    pub sigma_innov: f64,
    #[serde(rename = "N")]
    pub n: usize,
}

impl GenSpec {
    /// Default coefficients for `kind`, with absent terms set to zero.
    pub fn for_kind(kind: GenKind, n: usize) -> Self {
        let d = kind.trend_degree();
        let mut b = [DEFAULT_B[0], 0.0, 0.0];
        if d >= 1 {
            b[1] = DEFAULT_B[1];
        }
        if d >= 2 {
            b[2] = DEFAULT_B[2];
        }
        GenSpec {
            kind,
            b,
            phi: if kind.has_ar() { DEFAULT_PHI } else { [0.0; 2] },
            sigma_innov: 1.0,
            n,
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma_innov = sigma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_innov > 0.0 && self.sigma_innov.is_finite()) {
            return Err(Error::Config("sigma_innov must be positive".into()));
        }
        if self.n < 2 {
            return Err(Error::Config("N must be at least 2".into()));
        }
        if self.b.iter().chain(&self.phi).any(|v| !v.is_finite()) {
            return Err(Error::Config("coefficients must be finite".into()));
        }
        let d = self.kind.trend_degree();
        if self.b[1..].iter().enumerate().any(|(k, v)| k + 1 > d && *v != 0.0) {
            return Err(Error::Config(format!("{} has no trend term beyond degree {d}", self.kind)));
        }
        if !self.kind.has_ar() && self.phi.iter().any(|v| *v != 0.0) {
            return Err(Error::Config(format!("{} has no AR terms", self.kind)));
        }
        Ok(())
    }
}

/// Simulate `y_j = b_0 + b_1 t_j + b_2 t_j² + ε_j` at `t_j = (j−1)/(N−1)`,
/// with `ε` an AR(2) process on Gaussian innovations started from zero.
pub fn generate_series(gen: &GenSpec, seed: u64) -> Result<TimeSeries> {
    gen.validate()?;
    let mut rng = seed::rng(seed);
    let noise = Normal::new(0.0, gen.sigma_innov).map_err(|e| Error::Config(e.to_string()))?;
    let n = gen.n;
    let mut eps = vec![0.0; n];
    let mut y = Vec::with_capacity(n);
    for j in 0..n {
        let ar = gen.phi[0] * if j >= 1 { eps[j - 1] } else { 0.0 } + gen.phi[1] * if j >= 2 { eps[j - 2] } else { 0.0 };
        eps[j] = ar + noise.sample(&mut rng);
        let t = j as f64 / (n - 1) as f64;
        y.push(gen.b[0] + gen.b[1] * t + gen.b[2] * t * t + eps[j]);
    }
    TimeSeries::new(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::mean;

    fn lag1_autocorrelation(y: &[f64]) -> f64 {
        let m = mean(y);
        let num: f64 = y.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
        let den: f64 = y.iter().map(|v| (v - m) * (v - m)).sum();
        num / den
    }

    #[test]
    fn constant_series_is_white_noise() {
        let n = 2000;
        let y = generate_series(&GenSpec::for_kind(GenKind::Constant, n), 3).unwrap();
        let bound = 3.0 / (n as f64).sqrt();
        assert!(mean(y.y()).abs() < bound);
        assert!(lag1_autocorrelation(y.y()).abs() < bound);
    }

    #[test]
    fn ar2_autocorrelation_follows_yule_walker() {
        let y = generate_series(&GenSpec::for_kind(GenKind::Ar2Only, 5000), 4).unwrap();
        let rho = lag1_autocorrelation(y.y());
        assert!((rho - 0.5 / 0.7).abs() < 0.05, "{rho}");
    }

    #[test]
    fn quadratic_coefficients_are_recovered_by_least_squares() {
        let y = generate_series(&GenSpec::for_kind(GenKind::Ar2Quadratic, 200), 5).unwrap();
        let x = nalgebra::DMatrix::from_fn(200, 3, |r, c| (r as f64 / 199.0).powi(c as i32));
        let yv = nalgebra::DVector::from_column_slice(y.y());
        let xtx = x.transpose() * &x;
        let b = xtx.cholesky().unwrap().solve(&(x.transpose() * yv));
        assert!((b[1] - 17.0).abs() < 8.0 && (b[2] - 25.0).abs() < 8.0, "{b}");
        // Increasing overall and convex.
        assert!(y.y()[199] > y.y()[0] + 20.0);
    }

    #[test]
    fn generator_is_deterministic_and_validated() {
        let g = GenSpec::for_kind(GenKind::Linear, 50);
        assert_eq!(generate_series(&g, 1).unwrap(), generate_series(&g, 1).unwrap());
        assert_ne!(generate_series(&g, 1).unwrap(), generate_series(&g, 2).unwrap());
        assert!(generate_series(&g.clone().with_sigma(0.0), 1).is_err());
        let mut bad = GenSpec::for_kind(GenKind::Constant, 50);
        bad.phi = [0.5, 0.0];
        assert!(bad.validate().is_err());
        let mut bad = GenSpec::for_kind(GenKind::Linear, 50);
        bad.b[2] = 1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn kinds_map_to_matching_fit_specs() {
        assert_eq!(GenKind::Ar2Quadratic.fit_spec().p, 2);
        assert_eq!(GenKind::Ar2Quadratic.fit_spec().trend_degree, 2);
        assert_eq!(GenKind::Linear.fit_spec().p, 0);
        let json = serde_json::to_string(&GenKind::Ar2Only).unwrap();
        assert_eq!(json, "\"ar2-only\"");
    }
}
