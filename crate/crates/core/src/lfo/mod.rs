//! Leave-future-out cross-validation: exact, forward PSIS and backward PSIS.

mod loo;
mod marginal;
mod measures;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PosteriorDraws, SamplerConfig, TimeSeries, TimeSeriesModel};
use crate::psis::{pareto_smooth, PsisDiagnostic, PsisResult};
use crate::seed;
use crate::stats::log_mean_exp;

pub use loo::{psis_loo, LooPoint, LooResult, LOO_K_THRESHOLD};
pub use marginal::{log_marginal_likelihood, MarginalLikelihood};
pub use measures::{
    backward_log_ratios, elpd_standard_error, forward_log_ratios, msap_elpd_term_exact,
    msap_elpd_term_psis, rmse_term, weighted_log_mean_exp,
};

use measures::{block_sums, log_mean_exp_mcse, weighted_log_mean_exp_mcse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Forward,
    Backward,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Elpd,
    Rmse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LfoConfig {
    /// Prediction horizon `M`.
    #[serde(rename = "M")]
    pub horizon: usize,
    /// Minimum history `L`.
    #[serde(rename = "L")]
    pub min_history: usize,
    /// Refit threshold on the Pareto k. Zero forces a refit at every step.
    pub tau: f64,
    pub mode: Mode,
    pub measure: Measure,
}

impl Default for LfoConfig {
    fn default() -> Self {
        LfoConfig {
            horizon: 1,
            min_history: 0,
            tau: 0.7,
            mode: Mode::Forward,
            measure: Measure::Elpd,
        }
    }
}

impl LfoConfig {
    pub fn new(horizon: usize, min_history: usize, tau: f64, mode: Mode) -> Self {
        LfoConfig {
            horizon,
            min_history,
            tau,
            mode,
            measure: Measure::Elpd,
        }
    }

    pub fn with_measure(mut self, measure: Measure) -> Self {
        self.measure = measure;
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    /// Check the configuration against a series of length `n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("M must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if self.min_history + self.horizon > n {
            return Err(Error::Config(format!(
                "L + M = {} exceeds the series length {n}; nothing to evaluate",
                self.min_history + self.horizon
            )));
        }
        Ok(())
    }

    /// Evaluation indices `L..=N−M`.
    pub fn eval_indices(&self, n: usize) -> std::ops::RangeInclusive<usize> {
        self.min_history..=n - self.horizon
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointwiseRecord {
    pub i: usize,
    pub value: f64,
    /// Pareto k of the ratios used at this step; `None` where the model was refit.
    /// A flat or degenerate ratio set gives `-inf`, serialized as `null`.
    pub k: Option<f64>,
    pub refit: bool,
    /// Monte-Carlo standard error of an ELPD term.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcse: Option<f64>,
}

fn is_false(b: &bool) -> bool {
    !b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LfoResult {
    pub mode: Mode,
    pub measure: Measure,
    #[serde(rename = "M")]
    pub horizon: usize,
    #[serde(rename = "L")]
    pub min_history: usize,
    pub tau: f64,
    pub total: f64,
    pub se: Option<f64>,
    /// Prefix lengths at which the model was (re)fit, ascending.
    pub refit_indices: Vec<usize>,
    /// Refits divided by the number of evaluation points.
    pub refit_proportion: f64,
    /// One record per evaluation index, ascending in `i`.
    pub pointwise: Vec<PointwiseRecord>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub partial: bool,
}

impl LfoResult {
    fn assemble(config: &LfoConfig, measure: Measure, mut pointwise: Vec<PointwiseRecord>, n_eval: usize, partial: bool) -> Self {
        pointwise.sort_by_key(|r| r.i);
        let values: Vec<f64> = pointwise.iter().map(|r| r.value).collect();
        let total = values.iter().sum();
        let refit_indices: Vec<usize> = pointwise.iter().filter(|r| r.refit).map(|r| r.i).collect();
        LfoResult {
            mode: config.mode,
            measure,
            horizon: config.horizon,
            min_history: config.min_history,
            tau: config.tau,
            total,
            se: elpd_standard_error(&values, config.horizon),
            refit_proportion: refit_indices.len() as f64 / n_eval.max(1) as f64,
            refit_indices,
            pointwise,
            partial,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.pointwise.iter().map(|r| r.value).collect()
    }

    /// `(i, k)` at every approximated step.
    pub fn k_values(&self) -> Vec<(usize, f64)> {
        self.pointwise
            .iter()
            .filter_map(|r| r.k.map(|k| (r.i, k)))
            .collect()
    }

    pub fn refit_count(&self) -> usize {
        self.refit_indices.len()
    }

    /// Largest finite recorded k, if any.
    pub fn max_k(&self) -> Option<f64> {
        self.k_values()
            .into_iter()
            .map(|(_, k)| k)
            .filter(|k| k.is_finite())
            .reduce(f64::max)
    }
}

/// Options shared by every engine entry point.
pub struct RunOptions<'a> {
    pub sampler: SamplerConfig,
    pub seed: u64,
    /// Receives one JSON line per PSIS step.
    pub trace: Option<&'a mut (dyn Write + Send)>,
}

impl RunOptions<'_> {
    pub fn new(sampler: SamplerConfig, seed: u64) -> Self {
        RunOptions {
            sampler,
            seed,
            trace: None,
        }
    }
}

#[derive(Serialize)]
struct TraceLine {
    i: usize,
    i_star: usize,
    #[serde(flatten)]
    psis: PsisDiagnostic,
}

struct Fit {
    draws: PosteriorDraws,
    ll: Vec<Vec<f64>>,
}

struct Runner<'a> {
    model: &'a dyn TimeSeriesModel,
    data: &'a TimeSeries,
    config: LfoConfig,
    measures: &'a [Measure],
    sampler: &'a SamplerConfig,
    seed: u64,
}

/// One step's values, indexed like `measures`.
type StepValues = Vec<(f64, Option<f64>)>;

impl Runner<'_> {
    fn fit(&self, i: usize) -> Result<Fit> {
        let fit_seed = seed::fit_seed(self.seed, i);
        let draws = match self.model.fit_prefix(self.data, i, self.sampler, fit_seed) {
            Err(e) if e.is_fit_failure() => {
                let retry = SamplerConfig {
                    warmup: (self.sampler.warmup * 2).max(1),
                    ..self.sampler.clone()
                };
                self.model.fit_prefix(self.data, i, &retry, fit_seed)?
            }
            other => other?,
        };
        let ll = draws.log_lik_matrix(self.model, self.data)?;
        Ok(Fit { draws, ll })
    }

    fn step_values(&self, fit: &Fit, i: usize, psis: Option<&PsisResult>) -> Result<StepValues> {
        let m = self.config.horizon;
        let chain_lens = fit.draws.chain_lens();
        self.measures
            .iter()
            .map(|measure| match measure {
                Measure::Elpd => {
                    let values = block_sums(&fit.ll, i, i + m);
                    Ok(match psis {
                        None => (log_mean_exp(&values), Some(log_mean_exp_mcse(&values, &chain_lens))),
                        Some(p) => (
                            weighted_log_mean_exp(&p.log_weights, &values),
                            Some(weighted_log_mean_exp_mcse(&p.log_weights, &values, &chain_lens)),
                        ),
                    })
                }
                Measure::Rmse => {
                    let mut rng = seed::rng(seed::predict_seed(self.seed, i));
                    let preds = fit
                        .draws
                        .draws()
                        .iter()
                        .map(|theta| self.model.predictive_sample(theta, self.data, i, m, false, &mut rng))
                        .collect::<Result<Vec<_>>>()?;
                    let weights = psis.map(|p| {
                        let max = p.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        p.log_weights.iter().map(|w| (w - max).exp()).collect::<Vec<_>>()
                    });
                    let value = rmse_term(&preds, &self.data.y()[i..i + m], weights.as_deref())?;
                    Ok((value, None))
                }
            })
            .collect()
    }

    fn results(&self, per_measure: Vec<Vec<PointwiseRecord>>, partial: bool) -> Vec<LfoResult> {
        let n_eval = self.config.eval_indices(self.data.len()).count();
        self.measures
            .iter()
            .zip(per_measure)
            .map(|(&m, records)| LfoResult::assemble(&self.config, m, records, n_eval, partial))
            .collect()
    }

    fn abort(&self, index: usize, per_measure: Vec<Vec<PointwiseRecord>>, source: Error) -> Error {
        if !source.is_fit_failure() {
            return source;
        }
        let partial = self.results(per_measure, true).swap_remove(0);
        Error::LfoAborted {
            index,
            partial: Box::new(partial),
            source: Box::new(source),
        }
    }

    fn push(per_measure: &mut [Vec<PointwiseRecord>], i: usize, values: StepValues, k: Option<f64>, refit: bool) {
        for (records, (value, mcse)) in per_measure.iter_mut().zip(values) {
            records.push(PointwiseRecord {
                i,
                value,
                k,
                refit,
                mcse,
            });
        }
    }

    /// Sequential PSIS run. `indices` is the visiting order; `initial` is the
    /// prefix of the first fit, which is exact at its own index when that
    /// index is the first one visited.
    fn run_sequential(
        &self,
        indices: Vec<usize>,
        initial: usize,
        mut trace: Option<&mut (dyn Write + Send)>,
    ) -> Result<Vec<LfoResult>> {
        let mut per_measure: Vec<Vec<PointwiseRecord>> = vec![Vec::new(); self.measures.len()];
        let forced = self.config.tau == 0.0;
        // Forced refits never use the initial fit, so it is not made.
        let mut current: Option<Fit> = if forced {
            None
        } else {
            Some(self.fit(initial).map_err(|e| self.abort(initial, per_measure.clone(), e))?)
        };
        for i in indices {
            let psis = match &current {
                Some(fit) if !forced && fit.draws.fitted_prefix_len() != i => {
                    let i_star = fit.draws.fitted_prefix_len();
                    let ratios: Vec<f64> = if i > i_star {
                        block_sums(&fit.ll, i_star, i)
                    } else {
                        block_sums(&fit.ll, i, i_star).into_iter().map(|v| -v).collect()
                    };
                    let psis = pareto_smooth(&ratios)?;
                    if let Some(out) = trace.as_deref_mut() {
                        serde_json::to_writer(
                            &mut *out,
                            &TraceLine {
                                i,
                                i_star,
                                psis: psis.diagnostic(),
                            },
                        )?;
                        out.write_all(b"\n")?;
                    }
                    Some(psis)
                }
                _ => None,
            };
            let approximate = match (&psis, &current) {
                (Some(p), _) => !(p.k_hat > self.config.tau),
                (None, Some(fit)) => fit.draws.fitted_prefix_len() == i,
                (None, None) => false,
            };
            if approximate {
                let fit = current.as_ref().expect("fit present");
                let values = self.step_values(fit, i, psis.as_ref())?;
                match psis {
                    Some(p) => Self::push(&mut per_measure, i, values, Some(p.k_hat), false),
                    // The initial fit evaluated at its own prefix.
                    None => Self::push(&mut per_measure, i, values, None, true),
                }
            } else {
                let fit = self.fit(i).map_err(|e| self.abort(i, per_measure.clone(), e))?;
                let values = self.step_values(&fit, i, None)?;
                Self::push(&mut per_measure, i, values, None, true);
                current = Some(fit);
            }
        }
        Ok(self.results(per_measure, false))
    }

    fn run_exact(&self) -> Result<Vec<LfoResult>> {
        let indices: Vec<usize> = self.config.eval_indices(self.data.len()).collect();
        let outcomes: Vec<Result<StepValues>> = indices
            .par_iter()
            .map(|&i| {
                let fit = self.fit(i)?;
                self.step_values(&fit, i, None)
            })
            .collect();
        let mut per_measure: Vec<Vec<PointwiseRecord>> = vec![Vec::new(); self.measures.len()];
        for (&i, outcome) in indices.iter().zip(outcomes) {
            match outcome {
                Ok(values) => Self::push(&mut per_measure, i, values, None, true),
                Err(e) => return Err(self.abort(i, per_measure, e)),
            }
        }
        Ok(self.results(per_measure, false))
    }
}

/// Run LFO-CV once for several measures, sharing the fits between them.
/// The mode and the other settings come from `config`; `config.measure` is
/// ignored in favour of `measures`.
pub fn lfo_measures(
    model: &dyn TimeSeriesModel,
    data: &TimeSeries,
    config: &LfoConfig,
    measures: &[Measure],
    options: RunOptions<'_>,
) -> Result<Vec<LfoResult>> {
    config.validate(data.len())?;
    options.sampler.validate()?;
    if measures.is_empty() {
        return Err(Error::Config("no measure requested".into()));
    }
    let runner = Runner {
        model,
        data,
        config: *config,
        measures,
        sampler: &options.sampler,
        seed: options.seed,
    };
    let n = data.len();
    let (first, last) = (config.min_history, n - config.horizon);
    match config.mode {
        Mode::Exact => runner.run_exact(),
        Mode::Forward => runner.run_sequential((first..=last).collect(), first, options.trace),
        Mode::Backward => runner.run_sequential((first..=last).rev().collect(), n, options.trace),
    }
}

/// LFO-CV with the mode and measure given in `config`.
pub fn lfo(
    model: &dyn TimeSeriesModel,
    data: &TimeSeries,
    config: &LfoConfig,
    options: RunOptions<'_>,
) -> Result<LfoResult> {
    Ok(lfo_measures(model, data, config, &[config.measure], options)?.swap_remove(0))
}

/// Forward PSIS-LFO-CV: fit at `L`, move forward, refit whenever `k > tau`.
pub fn lfo_forward(
    model: &dyn TimeSeriesModel,
    data: &TimeSeries,
    config: &LfoConfig,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<LfoResult> {
    lfo(model, data, &config.with_mode(Mode::Forward), RunOptions::new(sampler.clone(), seed))
}

/// Backward PSIS-LFO-CV: start from the full-data fit and move backward from
/// `N − M`, refitting whenever `k > tau`.
pub fn lfo_backward(
    model: &dyn TimeSeriesModel,
    data: &TimeSeries,
    config: &LfoConfig,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<LfoResult> {
    lfo(model, data, &config.with_mode(Mode::Backward), RunOptions::new(sampler.clone(), seed))
}

/// Exact LFO-CV: one fit per evaluation index, run in parallel.
pub fn lfo_exact(
    model: &dyn TimeSeriesModel,
    data: &TimeSeries,
    config: &LfoConfig,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<LfoResult> {
    lfo(model, data, &config.with_mode(Mode::Exact), RunOptions::new(sampler.clone(), seed))
}

/// LFO-CV over several series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeriesResult {
    pub units: Vec<Option<String>>,
    pub series: Vec<LfoResult>,
    pub total: f64,
    pub se: Option<f64>,
}

/// Apply LFO-CV to each series separately and sum the totals. Series `u`
/// uses a seed derived from `(seed, u)`. Only independent series are
/// supported.
pub fn lfo_series(
    model: &dyn TimeSeriesModel,
    series: &[TimeSeries],
    config: &LfoConfig,
    sampler: &SamplerConfig,
    seed: u64,
    independent: bool,
) -> Result<MultiSeriesResult> {
    if !independent {
        return Err(Error::Unsupported("dependent series are not supported".into()));
    }
    if series.is_empty() {
        return Err(Error::Config("no series given".into()));
    }
    let results = series
        .iter()
        .enumerate()
        .map(|(u, data)| {
            let s = seed::derive(seed, &[seed::stream::SERIES, u as u64]);
            lfo(model, data, config, RunOptions::new(sampler.clone(), s))
        })
        .collect::<Result<Vec<_>>>()?;
    let total = results.iter().map(|r| r.total).sum();
    let se = results
        .iter()
        .map(|r| r.se.map(|s| s * s))
        .sum::<Option<f64>>()
        .map(f64::sqrt);
    Ok(MultiSeriesResult {
        units: series.iter().map(|s| s.unit().map(str::to_owned)).collect(),
        series: results,
        total,
        se,
    })
}
