//! The contract a Bayesian time-series model satisfies to be cross-validated,
//! plus the data and posterior-draw containers.
//!
//! Observation numbers `j` are 1-based throughout, matching the prefix-length
//! convention: a fit to prefix `i` has seen observations `1..=i`, and an
//! `M`-step-ahead prediction from `i` covers observations `i+1..=i+M`.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered observations with strictly increasing time stamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    t: Vec<f64>,
    y: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    unit: Option<String>,
}

impl TimeSeries {
    /// Series with time stamps `1..=N`.
    pub fn new(y: Vec<f64>) -> Result<Self> {
        let t = (1..=y.len()).map(|v| v as f64).collect();
        Self::with_times(t, y)
    }

    pub fn with_times(t: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::Domain("time series must have at least one observation".into()));
        }
        if t.len() != y.len() {
            return Err(Error::Domain(format!(
                "time stamps ({}) and observations ({}) differ in length",
                t.len(),
                y.len()
            )));
        }
        if let Some(j) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("observation {} is not finite", j + 1)));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("time stamps must be finite".into()));
        }
        if let Some(w) = t.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Domain(format!(
                "time stamps must be strictly increasing (t[{}] = {} >= t[{}] = {})",
                w + 1,
                t[w],
                w + 2,
                t[w + 1]
            )));
        }
        Ok(TimeSeries { t, y, unit: None })
    }

    pub fn with_unit(mut self, unit: impl Into<String>) -> Self {
        self.unit = Some(unit.into());
        self
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn unit(&self) -> Option<&str> {
        self.unit.as_deref()
    }

    /// Observation `j` (1-based).
    pub fn obs(&self, j: usize) -> f64 {
        self.y[j - 1]
    }
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    t: f64,
    y: f64,
    #[serde(default)]
    unit: Option<String>,
}

/// Read series from CSV with a required `t,y` header. An optional `unit`
/// column splits the file into independent series, returned in order of
/// first appearance of each unit.
pub fn read_csv<R: Read>(reader: R) -> Result<Vec<TimeSeries>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if !headers.iter().any(|h| h == "t") || !headers.iter().any(|h| h == "y") {
        return Err(Error::Config(format!(
            "expected CSV header with columns `t,y` (optionally `unit`), found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (line, row) in rdr.deserialize::<CsvRow>().enumerate() {
        let row = row.map_err(|e| Error::Config(format!("CSV row {}: {e}", line + 2)))?;
        let key = row.unit.unwrap_or_default();
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        let entry = groups.entry(key).or_default();
        entry.0.push(row.t);
        entry.1.push(row.y);
    }
    if order.is_empty() {
        return Err(Error::Config("CSV contains no observations".into()));
    }
    order
        .into_iter()
        .map(|key| {
            let (t, y) = groups.remove(&key).expect("group recorded");
            let ts = TimeSeries::with_times(t, y)?;
            Ok(if key.is_empty() { ts } else { ts.with_unit(key) })
        })
        .collect()
}

pub fn read_csv_path(path: &Path) -> Result<Vec<TimeSeries>> {
    read_csv(std::fs::File::open(path)?)
}

/// Settings for the built-in Metropolis sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    /// Total kept draws `S`, split across chains.
    pub draws: usize,
    /// Iterations per kept draw after warmup.
    pub thin: usize,
    /// Acceptance rate the warmup adaptation aims for.
    pub target_accept: f64,
    /// Post-warmup acceptance window; a rate outside it is a fit failure.
    pub accept_min: f64,
    pub accept_max: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 4,
            warmup: 1000,
            draws: 1000,
            thin: 5,
            target_accept: 0.3,
            accept_min: 0.1,
            accept_max: 0.6,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.draws < self.chains || self.thin == 0 {
            return Err(Error::Config(format!(
                "sampler needs chains >= 1, draws >= chains and thin >= 1 (got {self:?})"
            )));
        }
        if !(0.0 < self.accept_min
            && self.accept_min < self.target_accept
            && self.target_accept < self.accept_max
            && self.accept_max < 1.0)
        {
            return Err(Error::Config(
                "sampler acceptance bounds must satisfy 0 < min < target < max < 1".into(),
            ));
        }
        Ok(())
    }

    /// Kept draws for each chain; the remainder goes to the first chains.
    pub fn chain_lens(&self) -> Vec<usize> {
        let base = self.draws / self.chains;
        let extra = self.draws % self.chains;
        (0..self.chains).map(|c| base + usize::from(c < extra)).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerDiagnostics {
    pub acceptance_rate: f64,
    pub chain_acceptance: Vec<f64>,
    pub chains: usize,
    /// Kept draws per chain, in storage order.
    pub chain_lens: Vec<usize>,
    pub warmup: usize,
    pub seed: u64,
}

/// `S` parameter draws targeting `p(θ | y_{1:i})`, tagged with `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    draws: Vec<Vec<f64>>,
    fitted_prefix_len: usize,
    diagnostics: SamplerDiagnostics,
}

impl PosteriorDraws {
    pub fn new(
        draws: Vec<Vec<f64>>,
        fitted_prefix_len: usize,
        diagnostics: SamplerDiagnostics,
    ) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::Domain("posterior needs at least one draw".into()));
        }
        let dim = draws[0].len();
        for (s, d) in draws.iter().enumerate() {
            if d.len() != dim {
                return Err(Error::Domain(format!("draw {s} has inconsistent dimension")));
            }
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("draw {s} has non-finite entries")));
            }
        }
        if !diagnostics.chain_lens.is_empty()
            && diagnostics.chain_lens.iter().sum::<usize>() != draws.len()
        {
            return Err(Error::Domain("chain lengths do not cover the draws".into()));
        }
        Ok(PosteriorDraws {
            draws,
            fitted_prefix_len,
            diagnostics,
        })
    }

    pub fn draws(&self) -> &[Vec<f64>] {
        &self.draws
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn fitted_prefix_len(&self) -> usize {
        self.fitted_prefix_len
    }

    pub fn diagnostics(&self) -> &SamplerDiagnostics {
        &self.diagnostics
    }

    /// Chain segment lengths, or a single segment when unknown.
    pub fn chain_lens(&self) -> Vec<usize> {
        if self.diagnostics.chain_lens.is_empty() {
            vec![self.draws.len()]
        } else {
            self.diagnostics.chain_lens.clone()
        }
    }

    /// Same draws with every draw repeated `times` times in place.
    pub fn repeated(&self, times: usize) -> Self {
        let draws = self
            .draws
            .iter()
            .flat_map(|d| std::iter::repeat_n(d.clone(), times))
            .collect();
        PosteriorDraws {
            draws,
            fitted_prefix_len: self.fitted_prefix_len,
            diagnostics: SamplerDiagnostics {
                chain_lens: vec![],
                ..self.diagnostics.clone()
            },
        }
    }

    /// Checked `log p(y_j | y_{1:j-1}, θ_s)`.
    pub fn conditional_log_lik(
        &self,
        model: &dyn TimeSeriesModel,
        data: &TimeSeries,
        draw: usize,
        j: usize,
    ) -> Result<f64> {
        if j == 0 || j > data.len() {
            return Err(Error::Contract(format!(
                "observation {j} outside 1..={}",
                data.len()
            )));
        }
        let v = model.conditional_log_lik(&self.draws[draw], data, j);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NumericDomain { j, draw })
        }
    }

    /// Per-draw conditional log likelihoods for every observation:
    /// `out[s][j - 1] = log p(y_j | y_{1:j-1}, θ_s)`.
    pub fn log_lik_matrix(
        &self,
        model: &dyn TimeSeriesModel,
        data: &TimeSeries,
    ) -> Result<Vec<Vec<f64>>> {
        self.draws
            .iter()
            .enumerate()
            .map(|(s, theta)| {
                let row = model.conditional_log_lik_path(theta, data);
                match row.iter().position(|v| !v.is_finite()) {
                    Some(j) => Err(Error::NumericDomain { j: j + 1, draw: s }),
                    None => Ok(row),
                }
            })
            .collect()
    }
}

/// What a model must provide to be cross-validated.
///
/// The likelihood is exposed per observation, conditional on the past, so
/// every importance ratio and predictive density can be assembled from
/// these factors.
pub trait TimeSeriesModel: Send + Sync {
    /// Draw from `p(θ | y_{1:prefix_len})`. `prefix_len = 0` targets the prior.
    /// Must be deterministic given `seed`.
    fn fit_prefix(
        &self,
        data: &TimeSeries,
        prefix_len: usize,
        config: &SamplerConfig,
        seed: u64,
    ) -> Result<PosteriorDraws>;

    /// `log p(y_j | y_{1:j-1}, θ)` for 1-based `j`. May return a non-finite
    /// value; callers check through [`PosteriorDraws::conditional_log_lik`].
    fn conditional_log_lik(&self, theta: &[f64], data: &TimeSeries, j: usize) -> f64;

    /// All conditional log likelihoods `j = 1..=N` for one draw.
    fn conditional_log_lik_path(&self, theta: &[f64], data: &TimeSeries) -> Vec<f64> {
        (1..=data.len())
            .map(|j| self.conditional_log_lik(theta, data, j))
            .collect()
    }

    /// Simulate `y_{i+1..=i+horizon}` given `y_{1:i}` and `θ`. Unless
    /// `free_forecast` is set, `i + horizon` must not exceed `N`.
    fn predictive_sample(
        &self,
        theta: &[f64],
        data: &TimeSeries,
        i: usize,
        horizon: usize,
        free_forecast: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<f64>>;

    /// JSON description of the model, recorded in run manifests.
    fn describe(&self) -> serde_json::Value;
}
