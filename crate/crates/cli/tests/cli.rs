use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lfocv::simlab::{generate_series, GenKind, GenSpec};
use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfocv"))
        .args(args)
        .env("LFOCV_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn assert_valid(schema_file: &str, instance: &Value) {
    let schema = read_json(&root().join("schemas").join(schema_file));
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = validator.iter_errors(instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{schema_file}: {errors:?}");
}

fn write_series(dir: &Path, name: &str, kind: GenKind, n: usize, seed: u64) -> PathBuf {
    let ts = generate_series(&GenSpec::for_kind(kind, n), seed).unwrap();
    let mut text = String::from("t,y\n");
    for (t, y) in ts.t().iter().zip(ts.y()) {
        text.push_str(&format!("{t},{y}\n"));
    }
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn write_model(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

const FAST_AR2_LINEAR: &str = r#"{"p": 2, "trend_degree": 1, "sampler": {"warmup": 400, "draws": 400}}"#;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn forced_refit_forward_equals_exact_and_outputs_validate() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_series(dir.path(), "y.csv", GenKind::Ar2Linear, 40, 1);
    let model = write_model(dir.path(), "m.json", FAST_AR2_LINEAR);
    let fwd = dir.path().join("fwd.json");
    let exact = dir.path().join("exact.json");
    let common = ["--data", s(&data), "--model", s(&model), "--L", "10", "--tau", "0", "--seed", "7"];
    let out = run(&[&["lfo"][..], &common, &["--mode", "forward", "--out", s(&fwd)]].concat());
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for key in ["total:", "se:", "refits:", "max k:"] {
        assert!(stdout.contains(key), "{stdout}");
    }
    ok(&run(&[&["lfo"][..], &common, &["--mode", "exact", "--out", s(&exact)]].concat()));
    let (a, b) = (read_json(&fwd), read_json(&exact));
    assert_eq!(a["total"], b["total"]);
    assert_eq!(a["refit_proportion"], 1.0);
    assert_valid("lfo_result.schema.json", &a);
    assert_valid("lfo_result.schema.json", &b);

    let manifest = read_json(&dir.path().join("fwd.manifest.json"));
    assert_valid("run_manifest.schema.json", &manifest);
    let digest = manifest["inputs"][0]["sha256"].as_str().unwrap().to_string();
    let bytes = fs::read(&data).unwrap();
    use sha2::Digest;
    assert_eq!(digest, hex::encode(sha2::Sha256::digest(&bytes)));
}

#[test]
fn trace_file_has_one_line_per_psis_step() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_series(dir.path(), "y.csv", GenKind::Ar2Linear, 40, 2);
    let model = write_model(dir.path(), "m.json", FAST_AR2_LINEAR);
    let out = dir.path().join("r.json");
    let trace = dir.path().join("trace/psis.jsonl");
    ok(&run(&[
        "lfo", "--data", s(&data), "--model", s(&model), "--L", "10", "--out", s(&out), "--trace", s(&trace),
    ]));
    // Every index after the initial fit is smoothed once before any refit.
    let text = fs::read_to_string(&trace).unwrap();
    assert_eq!(text.lines().count(), 29);
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["i"].as_u64().unwrap() > v["i_star"].as_u64().unwrap());
    }
    assert_valid("lfo_result.schema.json", &read_json(&out));
}

#[test]
fn missing_header_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    fs::write(&data, "time,value\n1,2\n2,3\n").unwrap();
    let model = write_model(dir.path(), "m.json", FAST_AR2_LINEAR);
    let out = run(&["lfo", "--data", s(&data), "--model", s(&model), "--out", s(&dir.path().join("o.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("t,y"));
}

#[test]
fn empty_dataset_and_bad_settings_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "t,y\n").unwrap();
    let model = write_model(dir.path(), "m.json", FAST_AR2_LINEAR);
    let o = dir.path().join("o.json");
    assert_eq!(run(&["loo", "--data", s(&empty), "--model", s(&model), "--out", s(&o)]).status.code(), Some(2));

    let data = write_series(dir.path(), "y.csv", GenKind::Linear, 20, 3);
    let too_long = run(&["lfo", "--data", s(&data), "--model", s(&model), "--L", "25", "--out", s(&o)]);
    assert_eq!(too_long.status.code(), Some(2));
    let bad_model = write_model(dir.path(), "bad.json", r#"{"p": 1, "trend_degree": 5}"#);
    assert_eq!(run(&["lfo", "--data", s(&data), "--model", s(&bad_model), "--out", s(&o)]).status.code(), Some(2));
    assert_eq!(run(&["lfo", "--data", s(&data)]).status.code(), Some(2));

    let threads = Command::new(env!("CARGO_BIN_EXE_lfocv"))
        .args(["loo", "--data", s(&data), "--model", s(&model), "--out", s(&o)])
        .env("LFOCV_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));
}

#[test]
fn fit_failure_exits_with_three_and_writes_partial_results() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_series(dir.path(), "y.csv", GenKind::Linear, 30, 4);
    let model = write_model(
        dir.path(),
        "m.json",
        r#"{"p": 0, "trend_degree": 1,
            "sampler": {"warmup": 200, "draws": 100, "target_accept": 0.3, "accept_min": 0.2999, "accept_max": 0.3001}}"#,
    );
    let o = dir.path().join("o.json");
    let out = run(&["lfo", "--data", s(&data), "--model", s(&model), "--L", "10", "--mode", "exact", "--out", s(&o)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let partial = read_json(&o);
    assert_eq!(partial["partial"], true);
    assert_valid("lfo_result.schema.json", &partial);
}

#[test]
fn loo_is_optimistic_on_trends_and_close_on_white_noise() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (GenKind::Linear, r#"{"p": 0, "trend_degree": 1}"#, true),
        (GenKind::Constant, r#"{"p": 0, "trend_degree": 0}"#, false),
    ];
    for (kind, spec, trending) in cases {
        let data = write_series(dir.path(), "y.csv", kind, 80, 5);
        let model = write_model(dir.path(), "m.json", spec);
        let (lfo_out, loo_out) = (dir.path().join("lfo.json"), dir.path().join("loo.json"));
        ok(&run(&["lfo", "--data", s(&data), "--model", s(&model), "--L", "20", "--out", s(&lfo_out)]));
        ok(&run(&["loo", "--data", s(&data), "--model", s(&model), "--out", s(&loo_out)]));
        let (lfo, loo) = (read_json(&lfo_out), read_json(&loo_out));
        assert_valid("loo_result.schema.json", &loo);
        assert_valid("run_manifest.schema.json", &read_json(&dir.path().join("loo.manifest.json")));
        let loo_total: f64 = loo["pointwise"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|p| p["j"].as_u64().unwrap() > 20)
            .map(|p| p["elpd"].as_f64().unwrap())
            .sum();
        let lfo_total = lfo["total"].as_f64().unwrap();
        if trending {
            assert!(loo_total > lfo_total, "{loo_total} vs {lfo_total}");
        } else {
            let se = lfo["se"].as_f64().unwrap().max(loo["se"].as_f64().unwrap());
            assert!((loo_total - lfo_total).abs() < 2.0 * se, "{loo_total} vs {lfo_total}");
        }
    }
}

#[test]
fn lake_huron_forward_is_close_to_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = root().join("data/lake_huron.csv");
    let model = root().join("models/lake_huron_ar4.json");
    let (f, e) = (dir.path().join("f.json"), dir.path().join("e.json"));
    let common = ["--data", s(&data), "--model", s(&model), "--L", "20", "--M", "1", "--tau", "0.7"];
    ok(&run(&[&["lfo"][..], &common, &["--out", s(&f)]].concat()));
    ok(&run(&[&["lfo"][..], &common, &["--mode", "exact", "--out", s(&e)]].concat()));
    let gap = read_json(&f)["total"].as_f64().unwrap() - read_json(&e)["total"].as_f64().unwrap();
    assert!(gap.abs() < 1.0, "gap {gap}");
}

#[test]
fn multiple_units_are_summed_and_dependence_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("t,y,unit\n");
    for (u, seed) in [("a", 1u64), ("b", 2)] {
        let ts = generate_series(&GenSpec::for_kind(GenKind::Linear, 25), seed).unwrap();
        for (t, y) in ts.t().iter().zip(ts.y()) {
            text.push_str(&format!("{t},{y},{u}\n"));
        }
    }
    let data = dir.path().join("units.csv");
    fs::write(&data, text).unwrap();
    let model = write_model(dir.path(), "m.json", r#"{"p": 0, "trend_degree": 1, "sampler": {"warmup": 300, "draws": 200}}"#);
    let o = dir.path().join("o.json");
    ok(&run(&["lfo", "--data", s(&data), "--model", s(&model), "--L", "10", "--out", s(&o)]));
    let v = read_json(&o);
    assert_valid("multi_series_result.schema.json", &v);
    assert_eq!(v["units"], serde_json::json!(["a", "b"]));
    let sum: f64 = v["series"].as_array().unwrap().iter().map(|r| r["total"].as_f64().unwrap()).sum();
    assert!((sum - v["total"].as_f64().unwrap()).abs() < 1e-9);
    let dep = run(&["lfo", "--data", s(&data), "--model", s(&model), "--L", "10", "--dependent", "--out", s(&o)]);
    assert_eq!(dep.status.code(), Some(2));
}

const SMALL_MATRIX: &str = r#"{
  "kinds": ["linear", "ar2-only"],
  "taus": [0.0, 0.7],
  "Ms": [1],
  "trials": 1,
  "N": 40,
  "L": 20,
  "sampler": {"warmup": 300, "draws": 200}
}"#;

#[test]
fn simulate_and_report_are_deterministic_and_match_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let matrix = dir.path().join("matrix.json");
    fs::write(&matrix, SMALL_MATRIX).unwrap();
    assert_valid("experiment_matrix.schema.json", &read_json(&matrix));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&run(&["simulate", "--matrix", s(&matrix), "--seed", "9", "--out-dir", s(&a)]));
    ok(&run(&["simulate", "--matrix", s(&matrix), "--seed", "9", "--out-dir", s(&b)]));
    for f in ["refits.csv", "histogram.csv", "report.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    assert_valid("experiment_report.schema.json", &read_json(&a.join("report.json")));
    assert_valid("run_manifest.schema.json", &read_json(&a.join("manifest.json")));
    assert_eq!(fs::read_dir(a.join("trials")).unwrap().count(), 2);

    let refits = fs::read_to_string(a.join("refits.csv")).unwrap();
    let mut lines = refits.lines();
    assert_eq!(lines.next(), Some("mode,M,tau,linear,ar2-only"));
    assert_eq!(lines.count(), 4);

    let hist = fs::read_to_string(a.join("histogram.csv")).unwrap();
    let mut rows = hist.lines();
    assert_eq!(rows.next(), Some("value,kind,tau,M,estimator"));
    let forced: Vec<&str> = rows.filter(|r| r.contains(",0,1,forward") || r.contains(",0,1,backward")).collect();
    assert_eq!(forced.len(), 4);
    assert!(forced.iter().all(|r| r.starts_with("0,")), "{forced:?}");

    // Regenerated tables are identical to the ones written by simulate.
    let c = dir.path().join("c");
    ok(&run(&["report", "--dir", s(&a), "--out-dir", s(&c)]));
    for f in ["refits.csv", "histogram.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(c.join(f)).unwrap());
    }
}

#[test]
fn bad_matrix_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let matrix = dir.path().join("matrix.json");
    fs::write(&matrix, r#"{"kinds": ["sideways"]}"#).unwrap();
    let out = run(&["simulate", "--matrix", s(&matrix), "--out-dir", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(&matrix, r#"{"trials": 0}"#).unwrap();
    let out = run(&["simulate", "--matrix", s(&matrix), "--out-dir", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let missing = run(&["report", "--dir", s(&dir.path().join("nothing"))]);
    assert_eq!(missing.status.code(), Some(2));
}
