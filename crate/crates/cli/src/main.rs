//! `lfocv` command-line tool.

mod manifest;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lfocv::ar_trend::{ArTrend, ModelFile};
use lfocv::lfo::{lfo, lfo_series, psis_loo, LfoConfig, Measure, Mode, RunOptions};
use lfocv::model::read_csv_path;
use lfocv::simlab::{histogram_csv, refit_table_csv, run_experiment, summarize_refits, ExperimentMatrix, ExperimentReport};
use lfocv::Error;
use serde::Serialize;

use manifest::RunManifest;

const EXIT_CONFIG: u8 = 2;
const EXIT_FIT: u8 = 3;

#[derive(Parser)]
#[command(name = "lfocv", version, about = "Leave-future-out cross-validation for time-series models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact or PSIS-approximated leave-future-out cross-validation.
    Lfo(LfoArgs),
    /// PSIS leave-one-out cross-validation from one full-data fit.
    Loo(LooArgs),
    /// Run a simulation matrix; per-trial results make the run resumable.
    Simulate(SimulateArgs),
    /// Rebuild the CSV tables from a saved experiment report.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Forward,
    Backward,
    Exact,
}

#[derive(Clone, Copy, ValueEnum)]
enum MeasureArg {
    Elpd,
    Rmse,
}

#[derive(Args)]
struct DataArgs {
    /// CSV with columns `t,y` and an optional `unit` column.
    #[arg(long)]
    data: PathBuf,
    /// JSON model specification.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output JSON path; the run manifest is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LfoArgs {
    #[command(flatten)]
    io: DataArgs,
    /// Prediction horizon.
    #[arg(long = "M", default_value_t = 1)]
    horizon: usize,
    /// Minimum history before the first prediction.
    #[arg(long = "L", default_value_t = 0)]
    min_history: usize,
    /// Pareto k threshold for refitting; 0 refits at every step.
    #[arg(long, default_value_t = 0.7)]
    tau: f64,
    #[arg(long, value_enum, default_value = "forward")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "elpd")]
    measure: MeasureArg,
    /// Treat the series of a multi-unit CSV as dependent (not supported).
    #[arg(long)]
    dependent: bool,
    /// Write one JSON line of PSIS diagnostics per approximated step.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct LooArgs {
    #[command(flatten)]
    io: DataArgs,
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment matrix JSON; defaults to the desk-scale design.
    #[arg(long)]
    matrix: Option<PathBuf>,
    /// Use the full-size design (N = 200, 100 trials) instead of the default.
    #[arg(long, conflicts_with = "matrix")]
    full_scale: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory for trial files, report and tables.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding `report.json` from a `simulate` run.
    #[arg(long)]
    dir: PathBuf,
    /// Where to write the tables; defaults to `--dir`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

struct Failure {
    code: u8,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = if error.is_fit_failure() { EXIT_FIT } else { EXIT_CONFIG };
        Failure { code, error }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

type CmdResult = Result<(), Failure>;

fn ensure_parent(path: &Path) -> std::io::Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(parent) => fs::create_dir_all(parent),
        None => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn load_model(path: &Path) -> Result<ModelFile, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read model file {}: {e}", path.display())))?;
    Ok(ModelFile::from_json(&text)?)
}

fn cmd_lfo(args: &LfoArgs) -> CmdResult {
    let mut manifest = RunManifest::start("lfo", args.io.seed);
    let series = read_csv_path(&args.io.data)?;
    let file = load_model(&args.io.model)?;
    manifest.add_input(&args.io.data)?;
    manifest.add_input(&args.io.model)?;
    let model = ArTrend::new(file.spec.clone())?;
    let mode = match args.mode {
        ModeArg::Forward => Mode::Forward,
        ModeArg::Backward => Mode::Backward,
        ModeArg::Exact => Mode::Exact,
    };
    let measure = match args.measure {
        MeasureArg::Elpd => Measure::Elpd,
        MeasureArg::Rmse => Measure::Rmse,
    };
    let config = LfoConfig::new(args.horizon, args.min_history, args.tau, mode).with_measure(measure);
    manifest.config = serde_json::json!({"lfo": config, "model": file.spec, "sampler": file.sampler});

    if series.len() > 1 || args.dependent {
        let result = lfo_series(&model, &series, &config, &file.sampler, args.io.seed, !args.dependent)?;
        write_json(&args.io.out, &result)?;
        manifest.finish(&args.io.out);
        write_json(&manifest_path(&args.io.out), &manifest)?;
        println!("series: {}", result.series.len());
        println!("total: {}", result.total);
        println!("se: {}", fmt_opt(result.se));
        println!("refits: {}", result.series.iter().map(|r| r.refit_count()).sum::<usize>());
        println!(
            "max k: {}",
            fmt_opt(result.series.iter().filter_map(|r| r.max_k()).reduce(f64::max))
        );
        return Ok(());
    }

    let data = &series[0];
    let mut trace = match &args.trace {
        Some(p) => {
            manifest.outputs.push(p.display().to_string());
            ensure_parent(p)?;
            Some(BufWriter::new(fs::File::create(p)?))
        }
        None => None,
    };
    let options = RunOptions {
        sampler: file.sampler.clone(),
        seed: args.io.seed,
        trace: trace.as_mut().map(|w| w as &mut (dyn Write + Send)),
    };
    let outcome = lfo(&model, data, &config, options);
    if let Some(mut w) = trace {
        w.flush()?;
    }
    let result = match outcome {
        Ok(r) => r,
        Err(Error::LfoAborted { index, partial, source }) => {
            write_json(&args.io.out, &partial)?;
            manifest.finish(&args.io.out);
            write_json(&manifest_path(&args.io.out), &manifest)?;
            return Err(Error::LfoAborted { index, partial, source }.into());
        }
        Err(e) => return Err(e.into()),
    };
    write_json(&args.io.out, &result)?;
    manifest.finish(&args.io.out);
    write_json(&manifest_path(&args.io.out), &manifest)?;
    println!("total: {}", result.total);
    println!("se: {}", fmt_opt(result.se));
    println!("refits: {}", result.refit_count());
    println!("max k: {}", fmt_opt(result.max_k()));
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |v| format!("{v}"))
}

fn cmd_loo(args: &LooArgs) -> CmdResult {
    let mut manifest = RunManifest::start("loo", args.io.seed);
    let series = read_csv_path(&args.io.data)?;
    if series.len() > 1 {
        return Err(Error::Unsupported("loo takes a single series".into()).into());
    }
    let file = load_model(&args.io.model)?;
    manifest.add_input(&args.io.data)?;
    manifest.add_input(&args.io.model)?;
    manifest.config = serde_json::json!({"model": file.spec, "sampler": file.sampler});
    let model = ArTrend::new(file.spec.clone())?;
    let result = psis_loo(&model, &series[0], &file.sampler, args.io.seed)?;
    write_json(&args.io.out, &result)?;
    manifest.finish(&args.io.out);
    write_json(&manifest_path(&args.io.out), &manifest)?;
    println!("total: {}", result.total);
    println!("se: {}", fmt_opt(result.se));
    println!("flagged (k > 0.7): {}", result.n_flagged);
    println!(
        "max k: {}",
        fmt_opt(result.pointwise.iter().filter_map(|p| p.k).reduce(f64::max))
    );
    Ok(())
}

fn write_tables(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    fs::create_dir_all(dir)?;
    let refits = dir.join("refits.csv");
    let hist = dir.join("histogram.csv");
    fs::write(&refits, refit_table_csv(&summarize_refits(report))?)?;
    fs::write(&hist, histogram_csv(report)?)?;
    Ok(vec![refits, hist])
}

fn cmd_simulate(args: &SimulateArgs) -> CmdResult {
    let mut manifest = RunManifest::start("simulate", args.seed);
    let matrix = match &args.matrix {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read matrix {}: {e}", p.display())))?;
            manifest.add_input(p)?;
            ExperimentMatrix::from_json(&text)?
        }
        None if args.full_scale => ExperimentMatrix::full_scale(),
        None => ExperimentMatrix::default(),
    };
    manifest.config = serde_json::to_value(&matrix)?;
    let report = run_experiment(&matrix, args.seed, Some(&args.out_dir.join("trials")))?;
    for r in report.records.iter().filter(|r| r.failed) {
        eprintln!(
            "trial failed: kind={} M={} tau={} trial={}: {}",
            r.kind,
            r.horizon,
            r.tau,
            r.trial,
            r.error.as_deref().unwrap_or("")
        );
    }
    let report_path = args.out_dir.join("report.json");
    write_json(&report_path, &report)?;
    manifest.outputs.push(report_path.display().to_string());
    for p in write_tables(&report, &args.out_dir)? {
        manifest.outputs.push(p.display().to_string());
    }
    manifest.finish_all();
    write_json(&args.out_dir.join("manifest.json"), &manifest)?;
    println!("records: {} ({} failed)", report.records.len(), report.n_failed());
    println!("report: {}", report_path.display());
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> CmdResult {
    let path = args.dir.join("report.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let report: ExperimentReport =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid report: {e}")))?;
    let out = args.out_dir.clone().unwrap_or_else(|| args.dir.clone());
    for p in write_tables(&report, &out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("LFOCV_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Config(format!("LFOCV_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = configure_threads().and_then(|_| match &cli.command {
        Command::Lfo(a) => cmd_lfo(a),
        Command::Loo(a) => cmd_loo(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Report(a) => cmd_report(a),
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
