//! Table and plot-ready CSV output.

use serde::Serialize;

use super::experiment::ExperimentReport;
use super::GenKind;
use crate::error::Result;
use crate::lfo::Mode;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefitRow {
    pub mode: Mode,
    #[serde(rename = "M")]
    pub horizon: usize,
    pub tau: f64,
    pub kind: GenKind,
    pub mean_refit_prop: f64,
    pub n: usize,
}

/// Mean refit proportions per (mode, M, tau, kind). Cells without
/// successful trials are omitted.
pub fn summarize_refits(report: &ExperimentReport) -> Vec<RefitRow> {
    let mut rows = Vec::new();
    for mode in [Mode::Forward, Mode::Backward] {
        for cell in &report.cells {
            let summary = match mode {
                Mode::Forward => cell.refit_prop_fwd.as_ref(),
                _ => cell.refit_prop_bwd.as_ref(),
            };
            if let Some(s) = summary {
                rows.push(RefitRow {
                    mode,
                    horizon: cell.horizon,
                    tau: cell.tau,
                    kind: cell.kind,
                    mean_refit_prop: s.mean,
                    n: s.n,
                });
            }
        }
    }
    rows
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Forward => "forward",
        Mode::Backward => "backward",
        Mode::Exact => "exact",
    }
}

/// Wide table: one row per (mode, M, tau), one column per kind. Missing
/// cells are left empty.
pub fn refit_table_csv(rows: &[RefitRow]) -> Result<String> {
    let mut kinds: Vec<GenKind> = rows.iter().map(|r| r.kind).collect();
    kinds.sort();
    kinds.dedup();
    let mut keys: Vec<(Mode, usize, f64)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.mode, r.horizon, r.tau)) {
            keys.push((r.mode, r.horizon, r.tau));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["mode".to_string(), "M".into(), "tau".into()];
    header.extend(kinds.iter().map(|k| k.name().to_string()));
    w.write_record(&header)?;
    for (mode, m, tau) in keys {
        let mut rec = vec![mode_name(mode).to_string(), m.to_string(), tau.to_string()];
        for kind in &kinds {
            let cell = rows
                .iter()
                .find(|r| (r.mode, r.horizon, r.tau, r.kind) == (mode, m, tau, *kind))
                .map(|r| format!("{:.4}", r.mean_refit_prop))
                .unwrap_or_default();
            rec.push(cell);
        }
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("utf-8 csv"))
}

/// Long table of estimate-minus-exact differences:
/// `value,kind,tau,M,estimator`, with estimators `forward`, `backward`,
/// `loo`, `rmse-forward` and `rmse-backward`.
pub fn histogram_csv(report: &ExperimentReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["value", "kind", "tau", "M", "estimator"])?;
    for r in report.records.iter().filter(|r| !r.failed) {
        let pairs = [
            ("forward", r.elpd_approx_fwd, r.elpd_exact),
            ("backward", r.elpd_approx_bwd, r.elpd_exact),
            ("loo", r.elpd_loo, r.elpd_exact),
            ("rmse-forward", r.rmse_approx_fwd, r.rmse_exact),
            ("rmse-backward", r.rmse_approx_bwd, r.rmse_exact),
        ];
        for (name, est, exact) in pairs {
            if let (Some(a), Some(b)) = (est, exact) {
                w.write_record([
                    (a - b).to_string(),
                    r.kind.name().to_string(),
                    r.tau.to_string(),
                    r.horizon.to_string(),
                    name.to_string(),
                ])?;
            }
        }
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("utf-8 csv"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simlab::{aggregate, ExperimentMatrix, TrialRecord};

    fn record(kind: GenKind, tau: f64, trial: usize, refits: usize, n_eval: usize) -> TrialRecord {
        TrialRecord {
            kind,
            horizon: 1,
            tau,
            trial,
            data_seed: 0,
            lfo_seed: 0,
            failed: false,
            error: None,
            elpd_exact: Some(-100.0),
            elpd_approx_fwd: Some(-100.5),
            elpd_approx_bwd: None,
            elpd_loo: Some(-95.0),
            refit_prop_fwd: Some(refits as f64 / n_eval as f64),
            refit_prop_bwd: None,
            rmse_exact: None,
            rmse_approx_fwd: None,
            rmse_approx_bwd: None,
        }
    }

    fn report(records: Vec<TrialRecord>) -> ExperimentReport {
        ExperimentReport {
            matrix: ExperimentMatrix::default(),
            master_seed: 0,
            cells: aggregate(&records),
            records,
        }
    }

    #[test]
    fn three_refits_over_seventy_eight_points() {
        let rows = summarize_refits(&report(vec![record(GenKind::Ar2Linear, 0.7, 0, 3, 78)]));
        assert_eq!(rows.len(), 1);
        assert!((rows[0].mean_refit_prop - 3.0 / 78.0).abs() < 1e-15);
        assert!((rows[0].mean_refit_prop - 0.038).abs() < 5e-4);
    }

    #[test]
    fn empty_cells_are_omitted() {
        let mut failed = record(GenKind::Linear, 0.7, 0, 1, 10);
        failed.failed = true;
        let rows = summarize_refits(&report(vec![failed, record(GenKind::Constant, 0.7, 0, 1, 10)]));
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].kind, GenKind::Constant);
        // No backward runs, so no backward rows.
        assert!(rows.iter().all(|r| r.mode == Mode::Forward));
    }

    #[test]
    fn csv_shapes() {
        let rep = report(vec![
            record(GenKind::Linear, 0.7, 0, 2, 10),
            record(GenKind::Linear, 0.7, 1, 4, 10),
            record(GenKind::Constant, 0.5, 0, 1, 10),
        ]);
        let table = refit_table_csv(&summarize_refits(&rep)).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "mode,M,tau,constant,linear");
        assert_eq!(lines[1], "forward,1,0.7,,0.3000");
        assert_eq!(lines[2], "forward,1,0.5,0.1000,");

        let hist = histogram_csv(&rep).unwrap();
        let lines: Vec<&str> = hist.lines().collect();
        assert_eq!(lines[0], "value,kind,tau,M,estimator");
        assert_eq!(lines[1], "-0.5,linear,0.7,1,forward");
        assert_eq!(lines[2], "5,linear,0.7,1,loo");
        assert_eq!(lines.len(), 1 + 3 * 2);
    }
}
