//! Experiment matrix runner with per-trial result files.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_series, GenKind, GenSpec};
use crate::ar_trend::ArTrend;
use crate::error::{Error, Result};
use crate::lfo::{lfo_measures, psis_loo, LfoConfig, LfoResult, Measure, Mode, RunOptions};
use crate::model::SamplerConfig;
use crate::seed;
use crate::stats::{mean, quantile, sd};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentMatrix {
    pub kinds: Vec<GenKind>,
    pub taus: Vec<f64>,
    #[serde(rename = "Ms")]
    pub horizons: Vec<usize>,
    pub trials: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "L")]
    pub min_history: usize,
    pub sigma_innov: f64,
    /// Also run backward PSIS-LFO-CV.
    pub backward: bool,
    /// Also compute PSIS-LOO.
    pub loo: bool,
    /// Also evaluate the squared-error measure.
    pub rmse: bool,
    pub sampler: SamplerConfig,
}

impl Default for ExperimentMatrix {
    /// Desk-scale design: every kind, `N = 100`, 20 trials.
    fn default() -> Self {
        ExperimentMatrix {
            kinds: GenKind::ALL.to_vec(),
            taus: vec![0.5, 0.6, 0.7],
            horizons: vec![1, 4],
            trials: 20,
            n: 100,
            min_history: 25,
            sigma_innov: 1.0,
            backward: true,
            loo: true,
            rmse: true,
            sampler: SamplerConfig::default(),
        }
    }
}

impl ExperimentMatrix {
    /// The full-size design: `N = 200`, 100 trials.
    pub fn full_scale() -> Self {
        ExperimentMatrix {
            n: 200,
            trials: 100,
            ..Default::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: ExperimentMatrix = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 || self.kinds.is_empty() || self.taus.is_empty() || self.horizons.is_empty() {
            return Err(Error::Config("matrix needs trials >= 1 and nonempty kinds, taus and Ms".into()));
        }
        self.sampler.validate()?;
        for &m in &self.horizons {
            for &tau in &self.taus {
                LfoConfig::new(m, self.min_history, tau, Mode::Forward).validate(self.n)?;
            }
        }
        GenSpec::for_kind(GenKind::Constant, self.n)
            .with_sigma(self.sigma_innov)
            .validate()
    }

    /// Everything except the trial count; trial files from a matrix with a
    /// different fingerprint are not reused.
    fn fingerprint(&self, master_seed: u64) -> String {
        let mut m = self.clone();
        m.trials = 0;
        m.kinds.clear();
        m.horizons.clear();
        serde_json::json!({"matrix": m, "seed": master_seed}).to_string()
    }
}

/// One (kind, M, tau, trial) outcome. ELPD and squared-error totals are
/// sums over the evaluation points `L..=N−M`; LOO is summed over the
/// observations after `L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub kind: GenKind,
    #[serde(rename = "M")]
    pub horizon: usize,
    pub tau: f64,
    pub trial: usize,
    pub data_seed: u64,
    pub lfo_seed: u64,
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub elpd_exact: Option<f64>,
    pub elpd_approx_fwd: Option<f64>,
    pub elpd_approx_bwd: Option<f64>,
    pub elpd_loo: Option<f64>,
    pub refit_prop_fwd: Option<f64>,
    pub refit_prop_bwd: Option<f64>,
    pub rmse_exact: Option<f64>,
    pub rmse_approx_fwd: Option<f64>,
    pub rmse_approx_bwd: Option<f64>,
}

impl TrialRecord {
    fn empty(kind: GenKind, horizon: usize, tau: f64, trial: usize, data_seed: u64, lfo_seed: u64) -> Self {
        TrialRecord {
            kind,
            horizon,
            tau,
            trial,
            data_seed,
            lfo_seed,
            failed: false,
            error: None,
            elpd_exact: None,
            elpd_approx_fwd: None,
            elpd_approx_bwd: None,
            elpd_loo: None,
            refit_prop_fwd: None,
            refit_prop_bwd: None,
            rmse_exact: None,
            rmse_approx_fwd: None,
            rmse_approx_bwd: None,
        }
    }

    fn fail(&mut self, e: &Error) {
        self.failed = true;
        self.error = Some(e.to_string());
    }
}

fn diff(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub sd: Option<f64>,
    /// Standard error of the mean.
    pub se_mean: Option<f64>,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let spread = (n >= 2).then(|| sd(values));
        Some(Summary {
            n,
            mean: mean(values),
            sd: spread,
            se_mean: spread.map(|s| s / (n as f64).sqrt()),
            q05: quantile(values, 0.05),
            q50: quantile(values, 0.5),
            q95: quantile(values, 0.95),
        })
    }

    /// Whether `mean ± z · se_mean` covers zero.
    pub fn covers_zero(&self, z: f64) -> bool {
        match self.se_mean {
            Some(se) => self.mean.abs() <= z * se,
            None => self.mean == 0.0,
        }
    }
}

/// Aggregates for one (kind, M, tau) cell over its successful trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub kind: GenKind,
    #[serde(rename = "M")]
    pub horizon: usize,
    pub tau: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    /// `elpd_approx_fwd − elpd_exact`.
    pub diff_fwd: Option<Summary>,
    pub diff_bwd: Option<Summary>,
    /// `elpd_loo − elpd_exact`.
    pub diff_loo: Option<Summary>,
    pub rmse_diff_fwd: Option<Summary>,
    pub rmse_diff_bwd: Option<Summary>,
    pub refit_prop_fwd: Option<Summary>,
    pub refit_prop_bwd: Option<Summary>,
    /// Share of trials with `elpd_loo > elpd_approx_fwd`.
    pub loo_above_fwd: Option<f64>,
}

/// Fold trial records into per-cell aggregates, in record order of first
/// appearance. Failed trials are only counted.
pub fn aggregate(records: &[TrialRecord]) -> Vec<CellSummary> {
    let mut keys: Vec<(GenKind, usize, u64)> = Vec::new();
    for r in records {
        let key = (r.kind, r.horizon, r.tau.to_bits());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(kind, horizon, tau_bits)| {
            let cell: Vec<&TrialRecord> = records
                .iter()
                .filter(|r| r.kind == kind && r.horizon == horizon && r.tau.to_bits() == tau_bits)
                .collect();
            let ok: Vec<&&TrialRecord> = cell.iter().filter(|r| !r.failed).collect();
            let collect = |f: &dyn Fn(&TrialRecord) -> Option<f64>| -> Option<Summary> {
                Summary::of(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            let loo_pairs: Vec<bool> = ok
                .iter()
                .filter_map(|r| Some(r.elpd_loo? > r.elpd_approx_fwd?))
                .collect();
            CellSummary {
                kind,
                horizon,
                tau: f64::from_bits(tau_bits),
                n_ok: ok.len(),
                n_failed: cell.len() - ok.len(),
                diff_fwd: collect(&|r| diff(r.elpd_approx_fwd, r.elpd_exact)),
                diff_bwd: collect(&|r| diff(r.elpd_approx_bwd, r.elpd_exact)),
                diff_loo: collect(&|r| diff(r.elpd_loo, r.elpd_exact)),
                rmse_diff_fwd: collect(&|r| diff(r.rmse_approx_fwd, r.rmse_exact)),
                rmse_diff_bwd: collect(&|r| diff(r.rmse_approx_bwd, r.rmse_exact)),
                refit_prop_fwd: collect(&|r| r.refit_prop_fwd),
                refit_prop_bwd: collect(&|r| r.refit_prop_bwd),
                loo_above_fwd: (!loo_pairs.is_empty())
                    .then(|| loo_pairs.iter().filter(|b| **b).count() as f64 / loo_pairs.len() as f64),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub matrix: ExperimentMatrix,
    pub master_seed: u64,
    pub records: Vec<TrialRecord>,
    pub cells: Vec<CellSummary>,
}

impl ExperimentReport {
    pub fn cell(&self, kind: GenKind, horizon: usize, tau: f64) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.kind == kind && c.horizon == horizon && c.tau == tau)
    }

    pub fn n_failed(&self) -> usize {
        self.records.iter().filter(|r| r.failed).count()
    }
}

/// Contents of one per-trial file: every tau for one (kind, M, trial).
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrialFile {
    fingerprint: String,
    records: Vec<TrialRecord>,
}

fn trial_path(dir: &Path, kind: GenKind, horizon: usize, trial: usize) -> PathBuf {
    dir.join(format!("{}_M{}_trial{:04}.json", kind.name(), horizon, trial))
}

fn totals(results: &[LfoResult]) -> (Option<f64>, Option<f64>) {
    let get = |m: Measure| results.iter().find(|r| r.measure == m).map(|r| r.total);
    (get(Measure::Elpd), get(Measure::Rmse))
}

fn run_trial(matrix: &ExperimentMatrix, kind: GenKind, horizon: usize, trial: usize, master_seed: u64) -> Vec<TrialRecord> {
    let data_seed = seed::derive(master_seed, &[seed::stream::DATA, kind.index(), trial as u64]);
    let lfo_seed = seed::derive(master_seed, &[seed::stream::FIT, kind.index(), trial as u64]);
    let mut records: Vec<TrialRecord> = matrix
        .taus
        .iter()
        .map(|&tau| TrialRecord::empty(kind, horizon, tau, trial, data_seed, lfo_seed))
        .collect();

    let gen = GenSpec::for_kind(kind, matrix.n).with_sigma(matrix.sigma_innov);
    let data = match generate_series(&gen, data_seed) {
        Ok(d) => d,
        Err(e) => {
            records.iter_mut().for_each(|r| r.fail(&e));
            return records;
        }
    };
    let model = match ArTrend::new(kind.fit_spec()) {
        Ok(m) => m,
        Err(e) => {
            records.iter_mut().for_each(|r| r.fail(&e));
            return records;
        }
    };
    let measures: Vec<Measure> = if matrix.rmse {
        vec![Measure::Elpd, Measure::Rmse]
    } else {
        vec![Measure::Elpd]
    };
    let run = |mode: Mode, tau: f64| {
        let config = LfoConfig::new(horizon, matrix.min_history, tau, mode);
        lfo_measures(&model, &data, &config, &measures, RunOptions::new(matrix.sampler.clone(), lfo_seed))
    };

    let (elpd_exact, rmse_exact) = match run(Mode::Exact, 1.0) {
        Ok(res) => totals(&res),
        Err(e) => {
            records.iter_mut().for_each(|r| r.fail(&e));
            return records;
        }
    };
    let loo = if matrix.loo {
        match psis_loo(&model, &data, &matrix.sampler, lfo_seed) {
            Ok(l) => Some(l.total_after(matrix.min_history)),
            Err(e) => {
                records.iter_mut().for_each(|r| r.fail(&e));
                return records;
            }
        }
    } else {
        None
    };

    for rec in records.iter_mut() {
        rec.elpd_exact = elpd_exact;
        rec.rmse_exact = rmse_exact;
        rec.elpd_loo = loo;
        match run(Mode::Forward, rec.tau) {
            Ok(res) => {
                (rec.elpd_approx_fwd, rec.rmse_approx_fwd) = totals(&res);
                rec.refit_prop_fwd = Some(res[0].refit_proportion);
            }
            Err(e) => {
                rec.fail(&e);
                continue;
            }
        }
        if matrix.backward {
            match run(Mode::Backward, rec.tau) {
                Ok(res) => {
                    (rec.elpd_approx_bwd, rec.rmse_approx_bwd) = totals(&res);
                    rec.refit_prop_bwd = Some(res[0].refit_proportion);
                }
                Err(e) => rec.fail(&e),
            }
        }
    }
    records
}

/// Run every (kind, M, trial) of the matrix in parallel. The same simulated
/// series and LFO seed are shared by all M and tau values of a (kind, trial)
/// pair, and the exact run is shared by all taus.
///
/// With `store` set, each (kind, M, trial) result is written to its own JSON
/// file there, and existing files from an identical matrix are reused.
pub fn run_experiment(matrix: &ExperimentMatrix, master_seed: u64, store: Option<&Path>) -> Result<ExperimentReport> {
    matrix.validate()?;
    if let Some(dir) = store {
        fs::create_dir_all(dir)?;
    }
    let fingerprint = matrix.fingerprint(master_seed);
    let mut jobs = Vec::new();
    for &kind in &matrix.kinds {
        for &horizon in &matrix.horizons {
            for trial in 0..matrix.trials {
                jobs.push((kind, horizon, trial));
            }
        }
    }
    let groups = jobs
        .par_iter()
        .map(|&(kind, horizon, trial)| -> Result<Vec<TrialRecord>> {
            let path = store.map(|d| trial_path(d, kind, horizon, trial));
            if let Some(p) = path.as_ref().filter(|p| p.exists()) {
                let cached: Option<TrialFile> = fs::read_to_string(p)
                    .ok()
                    .and_then(|t| serde_json::from_str(&t).ok());
                if let Some(file) = cached.filter(|f| f.fingerprint == fingerprint) {
                    return Ok(file.records);
                }
            }
            let records = run_trial(matrix, kind, horizon, trial, master_seed);
            if let Some(p) = path {
                let file = TrialFile {
                    fingerprint: fingerprint.clone(),
                    records,
                };
                let tmp = p.with_extension("json.tmp");
                fs::write(&tmp, serde_json::to_vec_pretty(&file)?)?;
                fs::rename(&tmp, &p)?;
                return Ok(file.records);
            }
            Ok(records)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records: Vec<TrialRecord> = groups.into_iter().flatten().collect();
    let tau_pos = |t: f64| matrix.taus.iter().position(|x| *x == t).unwrap_or(usize::MAX);
    let kind_pos = |k: GenKind| matrix.kinds.iter().position(|x| *x == k).unwrap_or(usize::MAX);
    let m_pos = |m: usize| matrix.horizons.iter().position(|x| *x == m).unwrap_or(usize::MAX);
    records.sort_by_key(|r| (kind_pos(r.kind), m_pos(r.horizon), tau_pos(r.tau), r.trial));
    let cells = aggregate(&records);
    Ok(ExperimentReport {
        matrix: matrix.clone(),
        master_seed,
        records,
        cells,
    })
}
