//! Pointwise predictive measures and importance ratios.

use crate::error::{Error, Result};
use crate::model::{PosteriorDraws, TimeSeries, TimeSeriesModel};
use crate::psis::PsisResult;
use crate::stats::{effective_sample_size, log_mean_exp, log_sum_exp, sd};

/// Per-draw `Σ_{j=from+1..=to} log p(y_j | y_{1:j-1}, θ_s)` from a
/// precomputed log-likelihood matrix (`ll[s][j - 1]`).
pub(crate) fn block_sums(ll: &[Vec<f64>], from: usize, to: usize) -> Vec<f64> {
    ll.iter().map(|row| row[from..to].iter().sum()).collect()
}

/// `log Σ_s w_s exp(v_s) − log Σ_s w_s`, with weights given in log space.
pub fn weighted_log_mean_exp(log_weights: &[f64], values: &[f64]) -> f64 {
    let joint: Vec<f64> = log_weights.iter().zip(values).map(|(w, v)| w + v).collect();
    log_sum_exp(&joint) - log_sum_exp(log_weights)
}

/// Monte-Carlo standard error of `log mean exp(v)` by the delta method,
/// with the draw count replaced by the effective sample size of `exp(v)`.
pub(crate) fn log_mean_exp_mcse(values: &[f64], chain_lens: &[usize]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let mean = scaled.iter().sum::<f64>() / scaled.len() as f64;
    if scaled.len() < 2 || mean <= 0.0 {
        return f64::NAN;
    }
    let ess = effective_sample_size(&scaled, chain_lens).max(1.0);
    sd(&scaled) / mean / ess.sqrt()
}

/// Delta-method standard error of a self-normalized importance sampling
/// estimate of `log E[exp(v)]`, inflated by the MCMC autocorrelation of
/// `exp(v)`.
pub(crate) fn weighted_log_mean_exp_mcse(
    log_weights: &[f64],
    values: &[f64],
    chain_lens: &[usize],
) -> f64 {
    let total_w = log_sum_exp(log_weights);
    let w: Vec<f64> = log_weights.iter().map(|l| (l - total_w).exp()).collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let h: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let est: f64 = w.iter().zip(&h).map(|(w, h)| w * h).sum();
    if est <= 0.0 {
        return f64::NAN;
    }
    let var: f64 = w.iter().zip(&h).map(|(w, h)| w * w * (h - est).powi(2)).sum();
    let n = h.len() as f64;
    let inflation = (n / effective_sample_size(&h, chain_lens).max(1.0)).max(1.0);
    (var * inflation).sqrt() / est
}

fn check_horizon(draws: &PosteriorDraws, data: &TimeSeries, i: usize, horizon: usize) -> Result<()> {
    if horizon == 0 {
        return Err(Error::Contract("horizon M must be at least 1".into()));
    }
    if i + horizon > data.len() {
        return Err(Error::Contract(format!(
            "i + M = {} exceeds series length {}",
            i + horizon,
            data.len()
        )));
    }
    if draws.fitted_prefix_len() > data.len() {
        return Err(Error::Contract("draws were fitted to a longer series".into()));
    }
    Ok(())
}

/// Exact M-step-ahead log predictive density from draws fitted to `y_{1:i}`:
/// `log (1/S) Σ_s p(y_{i+1:i+M} | y_{1:i}, θ_s)`.
pub fn msap_elpd_term_exact(
    draws: &PosteriorDraws,
    model: &dyn TimeSeriesModel,
    data: &TimeSeries,
    i: usize,
    horizon: usize,
) -> Result<f64> {
    check_horizon(draws, data, i, horizon)?;
    if draws.fitted_prefix_len() != i {
        return Err(Error::Contract(format!(
            "exact term at i = {i} needs draws fitted to prefix {i}, got {}",
            draws.fitted_prefix_len()
        )));
    }
    let ll = draws.log_lik_matrix(model, data)?;
    Ok(log_mean_exp(&block_sums(&ll, i, i + horizon)))
}

/// Log importance ratios moving forward from the fitted prefix `i*` to `i > i*`:
/// `Σ_{j=i*+1..=i} log p(y_j | y_{1:j-1}, θ_s)`.
pub fn forward_log_ratios(
    draws: &PosteriorDraws,
    model: &dyn TimeSeriesModel,
    data: &TimeSeries,
    i: usize,
) -> Result<Vec<f64>> {
    let i_star = draws.fitted_prefix_len();
    if i <= i_star || i > data.len() {
        return Err(Error::Contract(format!(
            "forward ratios need i* < i <= N (i* = {i_star}, i = {i}, N = {})",
            data.len()
        )));
    }
    let ll = draws.log_lik_matrix(model, data)?;
    Ok(block_sums(&ll, i_star, i))
}

/// Log importance ratios moving backward from the fitted prefix `i*` to
/// `i < i*`: `−Σ_{j=i+1..=i*} log p(y_j | y_{1:j-1}, θ_s)`.
pub fn backward_log_ratios(
    draws: &PosteriorDraws,
    model: &dyn TimeSeriesModel,
    data: &TimeSeries,
    i: usize,
) -> Result<Vec<f64>> {
    let i_star = draws.fitted_prefix_len();
    if i >= i_star || i_star > data.len() {
        return Err(Error::Contract(format!(
            "backward ratios need i < i* <= N (i* = {i_star}, i = {i})"
        )));
    }
    let ll = draws.log_lik_matrix(model, data)?;
    Ok(block_sums(&ll, i, i_star).into_iter().map(|v| -v).collect())
}

/// Importance-weighted M-step-ahead log predictive density:
/// `log(Σ_s w_s p(y_{i+1:i+M} | y_{1:i}, θ_s) / Σ_s w_s)`.
pub fn msap_elpd_term_psis(
    draws: &PosteriorDraws,
    model: &dyn TimeSeriesModel,
    data: &TimeSeries,
    i: usize,
    horizon: usize,
    psis: &PsisResult,
) -> Result<f64> {
    check_horizon(draws, data, i, horizon)?;
    if psis.len() != draws.len() {
        return Err(Error::Contract(format!(
            "{} weights for {} draws",
            psis.len(),
            draws.len()
        )));
    }
    let ll = draws.log_lik_matrix(model, data)?;
    let values = block_sums(&ll, i, i + horizon);
    Ok(weighted_log_mean_exp(&psis.log_weights, &values))
}

/// Squared-error measure summed over the `M` predicted responses:
/// `Σ_m Σ_s w_s (ŷ_{s,m} − y_m)² / Σ_s w_s`.
///
/// `predictions[s]` is one predicted path of length `M`. Weights are on the
/// linear scale; `None` means uniform. Despite the name no square root is
/// taken.
pub fn rmse_term(predictions: &[Vec<f64>], y_obs: &[f64], weights: Option<&[f64]>) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Contract("no predictions".into()));
    }
    if let Some(s) = predictions.iter().position(|p| p.len() != y_obs.len()) {
        return Err(Error::Contract(format!(
            "prediction {s} has length {}, expected {}",
            predictions[s].len(),
            y_obs.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != predictions.len() {
            return Err(Error::Contract(format!(
                "{} weights for {} predictions",
                w.len(),
                predictions.len()
            )));
        }
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || !(w.iter().sum::<f64>() > 0.0) {
            return Err(Error::Domain("weights must be finite, nonnegative and not all zero".into()));
        }
    }
    if predictions.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Domain("predictions must be finite".into()));
    }
    let total_w: f64 = weights.map_or(predictions.len() as f64, |w| w.iter().sum());
    let mut out = 0.0;
    for (m, y) in y_obs.iter().enumerate() {
        let acc: f64 = predictions
            .iter()
            .enumerate()
            .map(|(s, p)| weights.map_or(1.0, |w| w[s]) * (p[m] - y).powi(2))
            .sum();
        out += acc / total_w;
    }
    Ok(out)
}

/// Standard error of the summed pointwise measure.
///
/// For `M = 1` this is `sd(pointwise) · sqrt(n)`. For `M > 1` neighbouring
/// terms share observations, so the SE is computed on every `M`-th term
/// (starting at the first) and rescaled to the full sum by `n / n_sub`.
/// Returns `None` when fewer than two terms are usable.
pub fn elpd_standard_error(pointwise: &[f64], horizon: usize) -> Option<f64> {
    let step = horizon.max(1);
    let sub: Vec<f64> = pointwise.iter().step_by(step).copied().collect();
    if sub.len() < 2 {
        return None;
    }
    let se_sub = sd(&sub) * (sub.len() as f64).sqrt();
    Some(se_sub * pointwise.len() as f64 / sub.len() as f64)
}
