//! Gaussian model with a polynomial time trend and AR(p) residuals:
//!
//! ```text
//! y_j = b_0 + b_1 t_j + b_2 t_j^2 + ε_j,    ε_j = Σ_k φ_k ε_{j-k} + e_j,    e_j ~ N(0, σ²)
//! ```
//!
//! with `t` scaled to the unit interval over the full series and residuals
//! before the first observation fixed at zero, so the likelihood factorizes
//! from `j = 1` with no latent initial state.
//!
//! Draws are stored as `[b_0..b_d, φ_1..φ_p, σ]`. The sampler works on
//! `log σ`.

mod sampler;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::model::{PosteriorDraws, SamplerConfig, SamplerDiagnostics, TimeSeries, TimeSeriesModel};
use crate::seed;
use crate::stats::normal_log_density;

/// Independent prior scales. `b_sd` holds either one value shared by every
/// trend coefficient or one value per coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Priors {
    #[serde(deserialize_with = "one_or_many")]
    pub b_sd: Vec<f64>,
    pub phi_sd: f64,
    pub sigma_sd: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Priors {
            b_sd: vec![10.0],
            phi_sd: 1.0,
            sigma_sd: 10.0,
        }
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(f64),
        Many(Vec<f64>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(v) => vec![v],
        OneOrMany::Many(v) => v,
    })
}

impl Priors {
    pub fn b_sd(&self, k: usize) -> f64 {
        if self.b_sd.len() == 1 {
            self.b_sd[0]
        } else {
            self.b_sd[k]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArTrendSpec {
    /// AR order.
    pub p: usize,
    /// 0 = intercept only, 1 = linear, 2 = quadratic.
    pub trend_degree: usize,
    #[serde(default)]
    pub priors: Priors,
    /// Known residual SD; when set σ is not sampled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_sigma: Option<f64>,
}

impl ArTrendSpec {
    pub fn new(p: usize, trend_degree: usize) -> Result<Self> {
        let spec = ArTrendSpec {
            p,
            trend_degree,
            priors: Priors::default(),
            fixed_sigma: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_priors(mut self, priors: Priors) -> Result<Self> {
        self.priors = priors;
        self.validate()?;
        Ok(self)
    }

    pub fn with_fixed_sigma(mut self, sigma: f64) -> Result<Self> {
        self.fixed_sigma = Some(sigma);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trend_degree > 2 {
            return Err(Error::Config(format!(
                "trend_degree must be 0, 1 or 2 (got {})",
                self.trend_degree
            )));
        }
        let pr = &self.priors;
        if pr.b_sd.len() != 1 && pr.b_sd.len() != self.n_trend() {
            return Err(Error::Config(format!(
                "priors.b_sd needs 1 or {} entries (got {})",
                self.n_trend(),
                pr.b_sd.len()
            )));
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !pr.b_sd.iter().all(|v| positive(*v)) || !positive(pr.phi_sd) || !positive(pr.sigma_sd) {
            return Err(Error::Config("prior SDs must be positive and finite".into()));
        }
        if let Some(s) = self.fixed_sigma {
            if !positive(s) {
                return Err(Error::Config("fixed_sigma must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn n_trend(&self) -> usize {
        self.trend_degree + 1
    }

    /// Length of a stored draw.
    pub fn n_params(&self) -> usize {
        self.n_trend() + self.p + 1
    }

    /// Dimension the sampler moves in.
    pub fn n_free(&self) -> usize {
        self.n_trend() + self.p + usize::from(self.fixed_sigma.is_none())
    }
}

/// Model spec plus sampler settings, as stored in model JSON files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    #[serde(flatten)]
    pub spec: ArTrendSpec,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

impl ModelFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("model spec: {e}")))?;
        file.spec.validate()?;
        file.sampler.validate()?;
        Ok(file)
    }
}

/// One parameter draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ArTrendParams {
    pub b: Vec<f64>,
    pub phi: Vec<f64>,
    pub sigma: f64,
}

impl ArTrendParams {
    pub fn from_slice(spec: &ArTrendSpec, theta: &[f64]) -> Self {
        let nb = spec.n_trend();
        ArTrendParams {
            b: theta[..nb].to_vec(),
            phi: theta[nb..nb + spec.p].to_vec(),
            sigma: theta[nb + spec.p],
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.b.clone();
        v.extend_from_slice(&self.phi);
        v.push(self.sigma);
        v
    }

    fn trend(&self, t: f64) -> f64 {
        self.b.iter().rev().fold(0.0, |acc, b| acc * t + b)
    }
}

/// Affine map of strictly increasing times onto `[0, 1]`.
pub fn time_rescale(t_raw: &[f64]) -> Result<Vec<f64>> {
    if t_raw.len() < 2 {
        return Err(Error::Domain("time rescaling needs at least two time points".into()));
    }
    let lo = t_raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t_raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Domain("time points are constant".into()));
    }
    Ok(t_raw.iter().map(|t| (t - lo) / (hi - lo)).collect())
}

/// Scaled times for `len ≥ N` steps; steps past the end of the data
/// continue at the mean raw spacing.
fn scaled_times(data: &TimeSeries, len: usize) -> Vec<f64> {
    let t = data.t();
    let n = t.len();
    let (lo, span, step) = if n == 1 {
        (t[0], 1.0, 1.0)
    } else {
        (t[0], t[n - 1] - t[0], (t[n - 1] - t[0]) / (n - 1) as f64)
    };
    (0..len)
        .map(|j| {
            let raw = if j < n { t[j] } else { t[n - 1] + (j + 1 - n) as f64 * step };
            if n == 1 && j == 0 {
                0.0
            } else {
                (raw - lo) / span
            }
        })
        .collect()
}

/// Residuals `ε_j = y_j − η_j` and innovations `e_j = ε_j − Σ_k φ_k ε_{j−k}`
/// for every observation, with `ε_j = 0` for `j ≤ 0`.
pub fn residual_recursion(params: &ArTrendParams, data: &TimeSeries) -> (Vec<f64>, Vec<f64>) {
    let t = scaled_times(data, data.len());
    residuals_upto(params, data.y(), &t, data.len())
}

fn residuals_upto(params: &ArTrendParams, y: &[f64], t: &[f64], upto: usize) -> (Vec<f64>, Vec<f64>) {
    let mut eps = Vec::with_capacity(upto);
    let mut innov = Vec::with_capacity(upto);
    for j in 0..upto {
        let r = y[j] - params.trend(t[j]);
        let ar: f64 = params
            .phi
            .iter()
            .enumerate()
            .take_while(|(k, _)| *k < j)
            .map(|(k, phi)| phi * eps[j - k - 1])
            .sum();
        eps.push(r);
        innov.push(r - ar);
    }
    (eps, innov)
}

/// Sum of independent prior log densities on the natural scale; `-inf`
/// outside the support.
pub fn log_prior(params: &ArTrendParams, spec: &ArTrendSpec) -> f64 {
    let pr = &spec.priors;
    let mut lp: f64 = params
        .b
        .iter()
        .enumerate()
        .map(|(k, b)| normal_log_density(*b, 0.0, pr.b_sd(k)))
        .sum();
    lp += params
        .phi
        .iter()
        .map(|phi| normal_log_density(*phi, 0.0, pr.phi_sd))
        .sum::<f64>();
    if spec.fixed_sigma.is_none() {
        if !(params.sigma > 0.0) {
            return f64::NEG_INFINITY;
        }
        lp += std::f64::consts::LN_2 + normal_log_density(params.sigma, 0.0, pr.sigma_sd);
    }
    lp
}

/// Joint log likelihood of the first `upto` observations, computed directly
/// from the innovations.
pub fn joint_log_lik(params: &ArTrendParams, data: &TimeSeries, upto: usize) -> f64 {
    let t = scaled_times(data, data.len());
    let (_, e) = residuals_upto(params, data.y(), &t, upto);
    e.iter().map(|v| normal_log_density(*v, 0.0, params.sigma)).sum()
}

/// Ordinary least squares trend coefficients on the first `n` points.
fn ols_trend(spec: &ArTrendSpec, y: &[f64], t: &[f64], n: usize) -> Option<Vec<f64>> {
    let nb = spec.n_trend();
    if n < nb + 1 {
        return None;
    }
    let x = DMatrix::from_fn(n, nb, |r, c| t[r].powi(c as i32));
    let yv = DVector::from_column_slice(&y[..n]);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * yv;
    xtx.cholesky().map(|c| c.solve(&xty).iter().copied().collect())
}

/// Adaptive random-walk Metropolis fit to the first `prefix_len`
/// observations. `prefix_len = 0` draws directly from the prior.
pub fn metropolis_fit(
    spec: &ArTrendSpec,
    data: &TimeSeries,
    prefix_len: usize,
    config: &SamplerConfig,
    seed: u64,
) -> Result<PosteriorDraws> {
    spec.validate()?;
    config.validate()?;
    if prefix_len > data.len() {
        return Err(Error::Contract(format!(
            "prefix length {prefix_len} exceeds series length {}",
            data.len()
        )));
    }
    if prefix_len == 0 {
        return prior_draws(spec, config, seed);
    }

    let t = scaled_times(data, data.len());
    let y = data.y();
    let nb = spec.n_trend();
    let p = spec.p;
    let to_params = |u: &[f64]| ArTrendParams {
        b: u[..nb].to_vec(),
        phi: u[nb..nb + p].to_vec(),
        sigma: spec.fixed_sigma.unwrap_or_else(|| u[nb + p].exp()),
    };
    let log_target = |u: &[f64]| -> f64 {
        let params = to_params(u);
        let lp = log_prior(&params, spec);
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        let (_, e) = residuals_upto(&params, y, &t, prefix_len);
        let ll: f64 = e.iter().map(|v| normal_log_density(*v, 0.0, params.sigma)).sum();
        // Jacobian of σ = exp(u).
        let jac = if spec.fixed_sigma.is_none() { u[nb + p] } else { 0.0 };
        ll + lp + jac
    };

    let mut start = ols_trend(spec, y, &t, prefix_len).unwrap_or_else(|| vec![0.0; nb]);
    start.extend(std::iter::repeat_n(0.0, p));
    if spec.fixed_sigma.is_none() {
        let params = ArTrendParams {
            b: start[..nb].to_vec(),
            phi: vec![0.0; p],
            sigma: 1.0,
        };
        let (eps, _) = residuals_upto(&params, y, &t, prefix_len);
        let rms = (eps.iter().map(|v| v * v).sum::<f64>() / eps.len() as f64).sqrt();
        start.push(rms.max(1e-3).ln());
    }
    if !log_target(&start).is_finite() {
        return Err(Error::Initialization(format!(
            "log posterior is not finite at the starting point for prefix {prefix_len}"
        )));
    }

    let (mode, cov) = sampler::find_mode(&log_target, &start);
    let init_cov = cov.unwrap_or_else(|| DMatrix::identity(mode.len(), mode.len()) * 0.01);
    let runs = sampler::sample(&log_target, &mode, &init_cov, config, seed);

    let chain_acceptance: Vec<f64> = runs.iter().map(|r| r.acceptance).collect();
    let acceptance_rate = chain_acceptance.iter().sum::<f64>() / chain_acceptance.len() as f64;
    let diagnostics = SamplerDiagnostics {
        acceptance_rate,
        chain_acceptance,
        chains: config.chains,
        chain_lens: runs.iter().map(|r| r.draws.len()).collect(),
        warmup: config.warmup,
        seed,
    };
    if !(acceptance_rate >= config.accept_min && acceptance_rate <= config.accept_max) {
        return Err(Error::FitFailure {
            prefix_len,
            reason: format!(
                "acceptance rate {acceptance_rate:.3} outside [{}, {}]",
                config.accept_min, config.accept_max
            ),
            diagnostics,
        });
    }
    let draws = runs
        .into_iter()
        .flat_map(|r| r.draws)
        .map(|u| to_params(&u).to_vec())
        .collect();
    PosteriorDraws::new(draws, prefix_len, diagnostics)
}

fn prior_draws(spec: &ArTrendSpec, config: &SamplerConfig, seed: u64) -> Result<PosteriorDraws> {
    let mut rng = seed::rng(seed);
    let pr = &spec.priors;
    let draws = (0..config.draws)
        .map(|_| {
            let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
            let b = (0..spec.n_trend()).map(|k| pr.b_sd(k) * z()).collect();
            let phi = (0..spec.p).map(|_| pr.phi_sd * z()).collect();
            let sigma = spec.fixed_sigma.unwrap_or_else(|| (pr.sigma_sd * z()).abs());
            ArTrendParams { b, phi, sigma }.to_vec()
        })
        .collect();
    let diagnostics = SamplerDiagnostics {
        acceptance_rate: 1.0,
        chain_acceptance: vec![1.0; config.chains],
        chains: config.chains,
        chain_lens: config.chain_lens(),
        warmup: 0,
        seed,
    };
    PosteriorDraws::new(draws, 0, diagnostics)
}

/// Exact `log p(y)` for the trend-only model with known σ and Gaussian
/// priors on the trend coefficients: `y ~ N(0, σ² I + X Σ_b Xᵀ)`.
pub fn conjugate_log_marginal(data: &TimeSeries, spec: &ArTrendSpec) -> Result<f64> {
    spec.validate()?;
    if spec.p > 0 {
        return Err(Error::Unsupported(
            "closed-form marginal likelihood needs p = 0".into(),
        ));
    }
    let sigma = spec.fixed_sigma.ok_or_else(|| {
        Error::Unsupported("closed-form marginal likelihood needs a known sigma".into())
    })?;
    let n = data.len();
    let t = scaled_times(data, n);
    let nb = spec.n_trend();
    let x = DMatrix::from_fn(n, nb, |r, c| t[r].powi(c as i32));
    let prior = DMatrix::from_fn(nb, nb, |r, c| {
        if r == c {
            spec.priors.b_sd(r).powi(2)
        } else {
            0.0
        }
    });
    let cov = &x * prior * x.transpose() + DMatrix::identity(n, n) * sigma * sigma;
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Domain("marginal covariance is not positive definite".into()))?;
    let y = DVector::from_column_slice(data.y());
    let alpha = chol.solve(&y);
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (y.dot(&alpha) + log_det + n as f64 * (2.0 * std::f64::consts::PI).ln()))
}

/// The built-in model, implementing [`TimeSeriesModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ArTrend {
    spec: ArTrendSpec,
}

impl ArTrend {
    pub fn new(spec: ArTrendSpec) -> Result<Self> {
        spec.validate()?;
        Ok(ArTrend { spec })
    }

    pub fn spec(&self) -> &ArTrendSpec {
        &self.spec
    }
}

impl TimeSeriesModel for ArTrend {
    fn fit_prefix(
        &self,
        data: &TimeSeries,
        prefix_len: usize,
        config: &SamplerConfig,
        seed: u64,
    ) -> Result<PosteriorDraws> {
        metropolis_fit(&self.spec, data, prefix_len, config, seed)
    }

    fn conditional_log_lik(&self, theta: &[f64], data: &TimeSeries, j: usize) -> f64 {
        let params = ArTrendParams::from_slice(&self.spec, theta);
        let t = scaled_times(data, j);
        let (_, e) = residuals_upto(&params, data.y(), &t, j);
        normal_log_density(e[j - 1], 0.0, params.sigma)
    }

    fn conditional_log_lik_path(&self, theta: &[f64], data: &TimeSeries) -> Vec<f64> {
        let params = ArTrendParams::from_slice(&self.spec, theta);
        let (_, e) = residual_recursion(&params, data);
        e.iter().map(|v| normal_log_density(*v, 0.0, params.sigma)).collect()
    }

    fn predictive_sample(
        &self,
        theta: &[f64],
        data: &TimeSeries,
        i: usize,
        horizon: usize,
        free_forecast: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<f64>> {
        if i > data.len() {
            return Err(Error::Contract(format!(
                "history length {i} exceeds series length {}",
                data.len()
            )));
        }
        if i + horizon > data.len() && !free_forecast {
            return Err(Error::Contract(format!(
                "prediction {}..={} runs past the data; enable free forecasting",
                i + 1,
                i + horizon
            )));
        }
        let params = ArTrendParams::from_slice(&self.spec, theta);
        if !(params.sigma > 0.0) {
            return Err(Error::Domain(format!("sigma must be positive, got {}", params.sigma)));
        }
        let noise = Normal::new(0.0, params.sigma)
            .map_err(|e| Error::Domain(format!("innovation distribution: {e}")))?;
        let t = scaled_times(data, i + horizon);
        let (mut eps, _) = residuals_upto(&params, data.y(), &t, i);
        let mut out = Vec::with_capacity(horizon);
        for j in i..i + horizon {
            let ar: f64 = params
                .phi
                .iter()
                .enumerate()
                .take_while(|(k, _)| *k < j)
                .map(|(k, phi)| phi * eps[j - k - 1])
                .sum();
            let e: f64 = noise.sample(rng);
            eps.push(ar + e);
            out.push(params.trend(t[j]) + ar + e);
        }
        Ok(out)
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "model": "ar-trend", "spec": self.spec })
    }
}
