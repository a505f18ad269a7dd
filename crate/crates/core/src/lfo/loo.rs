//! PSIS leave-one-out baseline.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{SamplerConfig, TimeSeries, TimeSeriesModel};
use crate::psis::pareto_smooth;
use crate::seed;

use super::measures::weighted_log_mean_exp;
use super::elpd_standard_error;

/// Observations whose Pareto k exceeds this are flagged as unreliable.
pub const LOO_K_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooPoint {
    /// 1-based observation index.
    pub j: usize,
    pub elpd: f64,
    /// `null` when the tail was flat.
    pub k: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooResult {
    pub total: f64,
    pub se: Option<f64>,
    pub n_flagged: usize,
    pub pointwise: Vec<LooPoint>,
}

impl LooResult {
    /// Sum over observations `j > after`, the ones an LFO run with `L = after`
    /// and `M = 1` predicts.
    pub fn total_after(&self, after: usize) -> f64 {
        self.pointwise.iter().filter(|p| p.j > after).map(|p| p.elpd).sum()
    }
}

/// PSIS-LOO from one full-data fit. The fit uses the same seed as the
/// full-data fit of an LFO run with the same master seed.
pub fn psis_loo(
    model: &dyn TimeSeriesModel,
    data: &TimeSeries,
    sampler: &SamplerConfig,
    master_seed: u64,
) -> Result<LooResult> {
    sampler.validate()?;
    let n = data.len();
    let draws = model.fit_prefix(data, n, sampler, seed::fit_seed(master_seed, n))?;
    let ll = draws.log_lik_matrix(model, data)?;
    let mut pointwise = Vec::with_capacity(n);
    for j in 0..n {
        let values: Vec<f64> = ll.iter().map(|row| row[j]).collect();
        let ratios: Vec<f64> = values.iter().map(|v| -v).collect();
        let psis = pareto_smooth(&ratios)?;
        let k = psis.k_hat.is_finite().then_some(psis.k_hat);
        pointwise.push(LooPoint {
            j: j + 1,
            elpd: weighted_log_mean_exp(&psis.log_weights, &values),
            k,
            flagged: k.is_some_and(|k| k > LOO_K_THRESHOLD),
        });
    }
    let values: Vec<f64> = pointwise.iter().map(|p| p.elpd).collect();
    Ok(LooResult {
        total: values.iter().sum(),
        se: elpd_standard_error(&values, 1),
        n_flagged: pointwise.iter().filter(|p| p.flagged).count(),
        pointwise,
    })
}
