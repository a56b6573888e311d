use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_interference-lab");

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).arg("--out-dir").arg(dir).args(args).env_remove("INTERFERENCE_LAB_SEED").output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path, json: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, json).unwrap();
    path.to_string_lossy().into_owned()
}

const SMALL: &str = r#"{
  "simulate": {"n": 3000, "oracle_draws": 20000},
  "estimate": {
    "bootstrap": {"b": 50},
    "nuisance": {
      "outcome_model": {"kind": "logistic"},
      "outcome_features": [{"variant": "block-cross"}],
      "propensity": {"mode": "joint", "model": {"kind": "logistic"}}
    }
  }
}"#;

#[test]
fn golden_fixtures_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixtures().join("golden_run.json");
    ok(dir.path(), &["--config", cfg.to_str().unwrap(), "simulate"]);
    for (out, fixture) in [("dataset.csv", "golden_dataset.csv"), ("oracle.csv", "golden_oracle.csv")] {
        let got = fs::read(dir.path().join(out)).unwrap();
        let want = fs::read(fixtures().join(fixture)).unwrap();
        assert!(got == want, "{out} differs from fixtures/{fixture}");
    }
}

#[test]
fn zero_pageviews_give_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"simulate": {"n": 0, "oracle_draws": 100}}"#);
    ok(dir.path(), &["--config", &cfg, "simulate"]);
    let text = fs::read_to_string(dir.path().join("dataset.csv")).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("pv_id,x1_1,"));
}

#[test]
fn rules_for_another_page_size_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"rules": ["1100"]}"#);
    let out = run(dir.path(), &["--config", &cfg, "simulate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("m=3"));
    assert!(!dir.path().join("dataset.csv").exists());
}

#[test]
fn invalid_rule_names_monotonicity_violation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"rules": ["010"]}"#);
    let out = run(dir.path(), &["--config", &cfg, "estimate"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("(0,1,0)") && err.contains("Bottom"), "{err}");
}

#[test]
fn missing_upstream_artifacts_name_their_producer() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["report"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`interference-lab estimate`"));
    let out = run(dir.path(), &["discover"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`interference-lab simulate`"));
}

#[test]
fn bad_config_and_lock_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"sed": 3}"#);
    assert_eq!(run(dir.path(), &["--config", &cfg, "graph"]).status.code(), Some(2));
    fs::write(dir.path().join(".interference-lab.lock"), b"").unwrap();
    let out = run(dir.path(), &["graph"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

fn manifest_seed(dir: &Path, cmd: &str) -> u64 {
    let text = fs::read_to_string(dir.join(format!("{cmd}.manifest.json"))).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["config"]["sem"]["seed"], v["config"]["seed"]);
    v["config"]["seed"].as_u64().unwrap()
}

#[test]
fn seed_flag_beats_env_beats_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"seed": 4}"#);
    ok(dir.path(), &["--config", &cfg, "graph"]);
    assert_eq!(manifest_seed(dir.path(), "graph"), 4);
    let with_env = |args: &[&str]| {
        let out = Command::new(BIN)
            .arg("--out-dir")
            .arg(dir.path())
            .args(args)
            .env("INTERFERENCE_LAB_SEED", "11")
            .output()
            .unwrap();
        assert!(out.status.success());
    };
    with_env(&["--config", &cfg, "graph"]);
    assert_eq!(manifest_seed(dir.path(), "graph"), 11);
    with_env(&["--config", &cfg, "--seed", "12", "graph"]);
    assert_eq!(manifest_seed(dir.path(), "graph"), 12);
}

#[test]
fn graph_verdicts_follow_extra_edges() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["graph"]);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("graph.json")).unwrap()).unwrap();
    assert_eq!(v["verdicts"].as_array().unwrap().len(), 4);
    assert!(v["verdicts"].as_array().unwrap().iter().all(|x| x["ignorable"] == true));
    assert_eq!(v["meta"]["command"], "graph");
    let cfg = write_config(dir.path(), r#"{"graph": {"extra_edges": [["U", "A2"]]}}"#);
    ok(dir.path(), &["--config", &cfg, "graph"]);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("graph.json")).unwrap()).unwrap();
    assert!(v["verdicts"].as_array().unwrap().iter().all(|x| x["ignorable"] == false));
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn pipeline_report_is_reproducible_and_flags_oracle_misses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    for cmd in ["simulate", "graph", "estimate", "discover", "predict-eval", "report"] {
        ok(dir.path(), &["--config", &cfg, cmd]);
    }
    let report = fs::read(dir.path().join("report.txt")).unwrap();
    ok(dir.path(), &["--config", &cfg, "report"]);
    assert_eq!(fs::read(dir.path().join("report.txt")).unwrap(), report);

    // means.csv: rule, position, four columns per estimator, observed last
    let (header, rows) = read_csv(&dir.path().join("means.csv"));
    assert_eq!(header.len(), 2 + 12 + 1);
    assert_eq!(header[2], "aipw");
    assert_eq!(header.last().unwrap(), "observed");
    assert_eq!(rows.len(), 12);

    let (_, effects) = read_csv(&dir.path().join("effects.csv"));
    assert!(effects.iter().any(|r| r[1] == "unit") && effects.iter().any(|r| r[1] == "average_overall"));

    let (header, auc) = read_csv(&dir.path().join("auc.csv"));
    assert_eq!(header, ["position", "variant", "n_features", "auc", "rel_diff_pct"]);
    assert_eq!(auc.len(), 15);

    // the estimate manifest records the dataset digest
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("estimate.manifest.json")).unwrap()).unwrap();
    let sim: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("simulate.manifest.json")).unwrap()).unwrap();
    let dataset_digest = &sim["outputs"][0]["sha256"];
    assert_eq!(&manifest["inputs"][0]["sha256"], dataset_digest);
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));

    // an oracle far from every estimate flags every interval
    let (_, flags) = read_csv(&dir.path().join("flags.csv"));
    assert!(flags.len() < 12, "{} honest flags", flags.len());
    let (oh, orows) = read_csv(&dir.path().join("oracle.csv"));
    let mut w = csv::Writer::from_path(dir.path().join("oracle.csv")).unwrap();
    w.write_record(&oh).unwrap();
    for r in &orows {
        w.write_record([r[0].as_str(), r[1].as_str(), "5", "0"]).unwrap();
    }
    w.flush().unwrap();
    ok(dir.path(), &["--config", &cfg, "report"]);
    let (_, flags) = read_csv(&dir.path().join("flags.csv"));
    assert_eq!(flags.len(), 3 * 12);
    assert!(fs::read_to_string(dir.path().join("report.txt")).unwrap().contains("36 of 36 intervals"));
}

#[test]
fn one_rule_dataset_estimates_equal_the_sample_mean() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{
          "simulate": {"n": 4000, "oracle_draws": 100},
          "estimate": {
            "k_folds": 1,
            "bootstrap": null,
            "nuisance": {
              "outcome_model": {"kind": "logistic"},
              "outcome_features": [{"variant": "block-cross"}],
              "propensity": {"mode": "joint", "model": {"kind": "logistic"}, "smoothing": 0.0}
            }
          }
        }"#,
    );
    ok(dir.path(), &["--config", &cfg, "simulate"]);
    let (header, rows) = read_csv(&dir.path().join("dataset.csv"));
    let a: Vec<usize> = ["a1", "a2", "a3"].iter().map(|c| header.iter().position(|h| h == c).unwrap()).collect();
    let one = dir.path().join("one.csv");
    let mut w = csv::Writer::from_path(&one).unwrap();
    w.write_record(&header).unwrap();
    for r in rows.iter().filter(|r| a.iter().map(|&k| r[k].as_str()).eq(["1", "1", "0"])) {
        w.write_record(r).unwrap();
    }
    w.flush().unwrap();
    ok(dir.path(), &["--config", &cfg, "--dataset", one.to_str().unwrap(), "estimate"]);
    let (header, rows) = read_csv(&dir.path().join("means.csv"));
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let mut checked = 0;
    for r in rows.iter().filter(|r| r[0] == "110") {
        let observed: f64 = r[col("observed")].parse().unwrap();
        for est in ["aipw", "gformula", "ipw"] {
            let v: f64 = r[col(est)].parse().unwrap();
            assert!((v - observed).abs() < 1e-6, "{est} {v} vs {observed}");
            checked += 1;
        }
    }
    assert_eq!(checked, 9);
}
