use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hailtraffic"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Writes a synthetic data set into `dir/data`.
fn synth(dir: &Path, scenario: &str) {
    fs::write(dir.join("scenario.toml"), scenario).unwrap();
    ok(&run(&["synth", "--scenario", "scenario.toml", "-o", "data"], dir));
}

fn estimate(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["estimate", "--traces", "data/traces.csv", "--network", "data/network.geojson", "-o", "run"];
    args.extend_from_slice(extra);
    run(&args, dir)
}

#[test]
fn synth_then_estimate_accounts_for_every_record() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), "seed = 3\norders_per_day = 150\n");
    let summary = json(&tmp.path().join("data/truth/summary.json"));
    let stdout = ok(&estimate(tmp.path(), &["--heatmap", "2016-10-01T08:00"]));
    assert!(stdout.trim_end().ends_with("manifest.json"));

    let manifest = json(&tmp.path().join("run/manifest.json"));
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["counts"]["rows"], summary["records"]);
    assert_eq!(manifest["counts"]["matched"], summary["records"]);
    assert_eq!(manifest["offset"]["source"], "estimated");
    let outputs = manifest["outputs"].as_object().unwrap();
    assert!(outputs.contains_key("heatmaps/flow_2016-10-01T0800.geojson"));
    for name in outputs.keys() {
        assert!(tmp.path().join("run").join(name).is_file(), "{name}");
    }
    assert_eq!(
        fs::read_to_string(tmp.path().join("run/flow.csv")).unwrap(),
        fs::read_to_string(tmp.path().join("data/truth/flow.csv")).unwrap()
    );
}

#[test]
fn missing_network_is_a_config_failure() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), "orders_per_day = 20\n");
    let out = run(
        &["estimate", "--traces", "data/traces.csv", "--network", "nowhere.geojson", "-o", "run"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let manifest = json(&tmp.path().join("run/manifest.json"));
    assert_eq!(manifest["failed_stage"], "network");
}

#[test]
fn error_ceiling_exits_with_code_two() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), "orders_per_day = 30\n");
    let path = tmp.path().join("data/traces.csv");
    let mut text = fs::read_to_string(&path).unwrap();
    let rows = text.lines().count();
    for _ in 0..rows / 10 {
        text.push_str("d,o,1475280000,104.0,not-a-number\n");
    }
    fs::write(&path, text).unwrap();
    let out = estimate(tmp.path(), &["--offset", "0,0"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&tmp.path().join("run/manifest.json"))["failed_stage"], "ingest");
}

#[test]
fn offset_reports_the_correction() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), "seed = 9\norders_per_day = 200\n[injected_offset]\ndlat = 0.0015\ndlon = -0.001\n");
    let stdout = ok(&run(
        &["offset", "--traces", "data/traces.csv", "--network", "data/network.geojson"],
        tmp.path(),
    ));
    let v: Value = serde_json::from_str(stdout.trim()).unwrap();
    let (dlat, dlon) = (v["dlat"].as_f64().unwrap(), v["dlon"].as_f64().unwrap());
    assert!((dlat + 0.0015).abs() <= 0.00015, "{v}");
    assert!((dlon - 0.001).abs() <= 0.0001, "{v}");
    assert!(v["sample_size"].as_u64().unwrap() > 0);
}

#[test]
fn heatmap_and_timeseries_from_a_run() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), "seed = 4\ndays = 2\norders_per_day = 200\n");
    ok(&estimate(tmp.path(), &[]));

    let stdout = ok(&run(
        &["heatmap", "--matrix", "run/flow.csv", "--network", "data/network.geojson", "--interval", "2016-10-01T08:00"],
        tmp.path(),
    ));
    let doc: Value = serde_json::from_str(&stdout).unwrap();
    let features = doc["features"].as_array().unwrap();
    assert_eq!(features.len(), 144);
    let max = doc["max_value"].as_f64().unwrap();
    assert!(max > 0.0);
    for f in features {
        let p = &f["properties"];
        let expected = p["value"].as_f64().unwrap() / max;
        assert!((p["ratio"].as_f64().unwrap() - expected).abs() < 1e-12);
    }
    let bad = run(
        &["heatmap", "--matrix", "run/flow.csv", "--network", "data/network.geojson", "--interval", "2017-01-01T08:00"],
        tmp.path(),
    );
    assert_eq!(bad.status.code(), Some(1));

    let stdout = ok(&run(
        &["timeseries", "--scenario", "weekend", "--input", "run", "--group", "weekend=2016-10-01,2016-10-02", "-o", "ts"],
        tmp.path(),
    ));
    assert_eq!(stdout.lines().count(), 8);
    let csv = fs::read_to_string(tmp.path().join("ts/timeseries/weekend_congestion_normalized.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("slot,day,value"));
    assert_eq!(csv.lines().count(), 1 + 2 * 96);
    assert!(tmp.path().join("ts/timeseries/weekend_flow.svg").is_file());

    let bad = run(&["timeseries", "--scenario", "holiday", "--input", "run"], tmp.path());
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn analyze_matches_the_estimate_outputs() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), "seed = 6\norders_per_day = 200\n");
    ok(&estimate(tmp.path(), &[]));
    ok(&run(&["analyze", "--input", "run", "--network", "data/network.geojson", "-o", "again"], tmp.path()));
    for name in ["speed.csv", "inrix.csv", "network_series.csv", "fitting.json"] {
        assert_eq!(
            fs::read(tmp.path().join("run").join(name)).unwrap(),
            fs::read(tmp.path().join("again").join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn flags_override_the_config_file() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), "orders_per_day = 100\n");
    fs::write(
        tmp.path().join("run.toml"),
        "traces = \"data/traces.csv\"\nnetwork = \"data/network.geojson\"\noutput = \"from_file\"\n\
         anomaly_kmh = 65.0\noffset = [0.0005, 0.0]\n[scenarios]\nday1 = [\"2016-10-01\"]\n",
    )
    .unwrap();
    ok(&run(&["--config", "run.toml", "estimate", "--anomaly-kmh", "55"], tmp.path()));
    let manifest = json(&tmp.path().join("from_file/manifest.json"));
    assert_eq!(manifest["config"]["anomaly_kmh"], 55.0);
    assert_eq!(manifest["offset"]["source"], "explicit");
    assert_eq!(manifest["offset"]["dlat"], 0.0005);
    assert!(manifest["outputs"].as_object().unwrap().contains_key("timeseries/day1_flow.csv"));

    ok(&run(&["--config", "run.toml", "estimate", "-o", "from_flag", "--offset", "-0.0005,0"], tmp.path()));
    let manifest = json(&tmp.path().join("from_flag/manifest.json"));
    assert_eq!(manifest["offset"]["dlat"], -0.0005);

    fs::write(tmp.path().join("bad.toml"), "no_such_key = 1\n").unwrap();
    let out = run(&["--config", "bad.toml", "estimate"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}
