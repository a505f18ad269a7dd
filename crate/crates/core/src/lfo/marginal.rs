//! Log marginal likelihood as a sum of one-step-ahead predictive densities.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{SamplerConfig, TimeSeries, TimeSeriesModel};

use super::{lfo, LfoConfig, LfoResult, Measure, Mode, RunOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalLikelihood {
    pub log_marginal: f64,
    /// Root sum of squared per-term Monte-Carlo errors.
    pub mcse: f64,
    pub lfo: LfoResult,
}

/// `log p(y) = Σ_{i=0}^{N-1} log p(y_{i+1} | y_{1:i})`, i.e. LFO with `L = 0`
/// and `M = 1`. The first term is the prior predictive density of `y_1`.
/// `tau = None` refits at every step; otherwise forward PSIS with that
/// threshold is used.
pub fn log_marginal_likelihood(
    model: &dyn TimeSeriesModel,
    data: &TimeSeries,
    sampler: &SamplerConfig,
    seed: u64,
    tau: Option<f64>,
) -> Result<MarginalLikelihood> {
    let config = match tau {
        None => LfoConfig::new(1, 0, 1.0, Mode::Exact),
        Some(tau) => LfoConfig::new(1, 0, tau, Mode::Forward),
    }
    .with_measure(Measure::Elpd);
    let result = lfo(model, data, &config, RunOptions::new(sampler.clone(), seed))?;
    let mcse = result
        .pointwise
        .iter()
        .map(|r| r.mcse.unwrap_or(0.0).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(MarginalLikelihood {
        log_marginal: result.total,
        mcse,
        lfo: result,
    })
}
