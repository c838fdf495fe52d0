use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn abcd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abcd")).args(args).env_remove("ABCD_SEED").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = abcd(args);
    assert!(out.status.success(), "abcd {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn report(dir: &Path) -> Value {
    let text = fs::read_to_string(dir.join("report.json")).expect("report written");
    let value: Value = serde_json::from_str(&text).expect("report is JSON");
    let schema: Value = serde_json::from_str(
        &fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas/report.schema.json")).unwrap(),
    )
    .unwrap();
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = validator.iter_errors(&value).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "report violates schema: {errors:?}");
    value
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Simulates a two-anchor experiment into `dir` and returns (data, schema).
fn simulated(dir: &Path, extra: &[&str]) -> (PathBuf, PathBuf) {
    let mut args = vec!["simulate", "--out", s(dir), "--seed", "11"];
    args.extend_from_slice(extra);
    ok(&args);
    (dir.join("data.csv"), dir.join("schema.json"))
}

#[test]
fn weak_first_stage_suppresses_iv() {
    let out = TempDir::new().unwrap();
    let data = fixture("weak_first_stage.csv");
    let run = ok(&["iv", "--data", s(&data), "--percent", "--out", s(out.path())]);
    assert!(run.stderr.is_empty() || String::from_utf8_lossy(&run.stderr).trim().is_empty());
    let r = report(out.path());
    let col = &r["result"]["datasets"][0]["columns"][0];
    let f = col["first_stage_f"].as_f64().unwrap();
    assert!((f - 4.96).abs() < 1e-6, "F = {f}");
    assert_eq!(col["iv"]["status"], "not_calculated");
    assert!(col["iv"]["reason"].as_str().unwrap().contains("F = 4.96 <= 10"));
    assert!((col["anchoring_effect"]["effect"].as_f64().unwrap() - 3.49).abs() < 1e-6);
    assert!(!r["warnings"].as_array().unwrap().is_empty());
    let tables = fs::read_to_string(out.path().join("tables.txt")).unwrap();
    assert!(tables.contains("not calculated"));
    assert!(tables.contains("3.490 pp"));
}

#[test]
fn first_stage_reports_gate() {
    let out = TempDir::new().unwrap();
    ok(&["first-stage", "--data", s(&fixture("weak_first_stage.csv")), "--out", s(out.path())]);
    let r = report(out.path());
    let d = &r["result"]["datasets"][0];
    assert_eq!(d["gate"], "fail");
    assert!((d["f_test"]["f"].as_f64().unwrap() - 4.96).abs() < 1e-6);
    assert_eq!(d["manipulation_check"]["verdict"], "fail");
}

#[test]
fn simulate_is_byte_identical_across_runs_and_threads() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let args = |dir: &Path| {
        vec![
            "simulate".to_string(),
            "--out".into(),
            s(dir).into(),
            "--seed".into(),
            "5".into(),
            "--replicates".into(),
            "100".into(),
            "--waves".into(),
            "0,8.8".into(),
        ]
    };
    let run = |dir: &Path, threads: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_abcd"))
            .args(args(dir))
            .env("RAYON_NUM_THREADS", threads)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    run(a.path(), "1");
    run(b.path(), "4");
    for f in ["data.csv", "schema.json", "report.json", "tables.txt"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }
    let r = report(a.path());
    assert_eq!(r["seed"], 5);
    assert_eq!(r["result"]["records"], 2000);
    assert_eq!(r["result"]["monte_carlo"]["replicates"], 100);
}

#[test]
fn seed_falls_back_to_environment() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    ok(&["simulate", "--out", s(a.path()), "--seed", "77"]);
    let out = Command::new(env!("CARGO_BIN_EXE_abcd"))
        .args(["simulate", "--out", s(b.path())])
        .env("ABCD_SEED", "77")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(a.path().join("data.csv")).unwrap(), fs::read(b.path().join("data.csv")).unwrap());
    assert_eq!(report(b.path())["seed"], 77);
}

#[test]
fn simulate_reads_config_file() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("sim.json");
    fs::write(&cfg, r#"{"n": 60, "anchors": {"grid": [4, 8, 12, 16]}, "seed": 3}"#).unwrap();
    let out = dir.path().join("out");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    let r = report(&out);
    assert_eq!(r["seed"], 3);
    assert_eq!(r["result"]["records"], 60);
    assert_eq!(r["config"]["inputs"][0]["path"], s(&cfg));

    fs::write(&cfg, r#"{"lambda": 2}"#).unwrap();
    let bad = abcd(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    assert!(!bad.status.success());
    let err: Value = serde_json::from_slice(&bad.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "invalid_config");
}

#[test]
fn simulated_data_flows_through_iv() {
    let dir = TempDir::new().unwrap();
    let (data, schema) = simulated(&dir.path().join("sim"), &[]);
    let out = dir.path().join("iv");
    ok(&["iv", "--data", s(&data), "--schema", s(&schema), "--out", s(&out)]);
    let r = report(&out);
    let col = &r["result"]["datasets"][0]["columns"][0];
    assert_eq!(col["outcome"], "y");
    assert_eq!(col["iv"]["status"], "estimated");
    let est = col["iv"]["estimate"].as_f64().unwrap();
    let se = col["iv"]["std_error"].as_f64().unwrap();
    assert!((est - 0.5).abs() < 4.0 * se, "{est} ± {se}");
    // OLS is biased upward by the confounder
    assert!(col["ols"]["estimate"].as_f64().unwrap() > 0.6);

    let out2 = dir.path().join("iv2");
    ok(&["iv", "--data", s(&data), "--schema", s(&schema), "--covariate", "confounder", "--out", s(&out2)]);
    let r2 = report(&out2);
    let ols = r2["result"]["datasets"][0]["columns"][0]["ols"]["estimate"].as_f64().unwrap();
    assert!((ols - 0.5).abs() < 0.1, "adjusting for the confounder removes OLS bias: {ols}");
}

#[test]
fn analysis_output_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let (data, schema) = simulated(&dir.path().join("sim"), &[]);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["plot", "--data", s(&data), "--schema", s(&schema), "--svg", "--out", s(out)]);
    }
    let mut names: Vec<PathBuf> = fs::read_dir(a.join("curves")).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    assert!(!names.is_empty());
    for p in &names {
        let other = b.join("curves").join(p.file_name().unwrap());
        assert_eq!(fs::read(p).unwrap(), fs::read(other).unwrap());
    }
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());
}

#[test]
fn plot_curves_have_increasing_x() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("sim.json");
    fs::write(&cfg, r#"{"n": 400, "anchors": {"grid": [0, 4, 8, 12, 16, 20]}, "window": [6, 14], "seed": 9}"#).unwrap();
    let sim = dir.path().join("sim");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&sim)]);
    let out = dir.path().join("plot");
    ok(&[
        "plot",
        "--data",
        s(&sim.join("data.csv")),
        "--schema",
        s(&sim.join("schema.json")),
        "--svg",
        "--out",
        s(&out),
    ]);
    let r = report(&out);
    let curves: Vec<String> =
        r["result"]["curves"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    assert!(curves.iter().any(|c| c.contains("local_linear")));
    assert!(curves.iter().any(|c| c.contains("_kde_")));
    for c in &curves {
        let text = fs::read_to_string(out.join(c)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x,y,ci_lo,ci_hi"));
        let xs: Vec<f64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert!(xs.windows(2).all(|w| w[0] < w[1]), "{c}");
        let svg = out.join("figures").join(Path::new(c).with_extension("svg").file_name().unwrap());
        assert!(fs::read_to_string(svg).unwrap().starts_with("<svg"));
    }
}

#[test]
fn percentile_rule_on_uniform_baseline() {
    let out = TempDir::new().unwrap();
    ok(&[
        "design-anchors",
        "--rule",
        "percentile",
        "--data",
        s(&fixture("baseline_uniform.csv")),
        "--out",
        s(out.path()),
    ]);
    let r = report(out.path());
    assert_eq!(r["result"]["plan"]["low"], 5.0);
    assert_eq!(r["result"]["plan"]["high"], 95.0);
    assert_eq!(r["result"]["baseline_n"], 101);
}

#[test]
fn extrema_rule_on_simulated_pilot() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("sim.json");
    fs::write(&cfg, r#"{"n": 3000, "anchors": {"grid": [0, 2, 4, 6, 8, 10, 12, 14, 16, 18, 20]}, "seed": 4}"#).unwrap();
    let sim = dir.path().join("sim");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&sim)]);
    let out = dir.path().join("design");
    ok(&[
        "design-anchors",
        "--rule",
        "extrema",
        "--data",
        s(&sim.join("data.csv")),
        "--schema",
        s(&sim.join("schema.json")),
        "--out",
        s(&out),
    ]);
    let plan = &report(&out)["result"]["plan"];
    let (lo, hi) = (plan["low"].as_f64().unwrap(), plan["high"].as_f64().unwrap());
    // window [5, 15] with tapers to 0 and 20: the pull peaks near the window edges
    assert!(lo > 0.0 && lo < 10.0 && hi > 10.0 && hi < 20.0, "({lo}, {hi})");
    assert!(plan["predicted_delta"].as_f64().unwrap() > 0.0);
}

#[test]
fn placebo_across_two_experiments() {
    let dir = TempDir::new().unwrap();
    let (a, schema) = simulated(&dir.path().join("first"), &[]);
    let cfg = dir.path().join("second.json");
    fs::write(&cfg, r#"{"belief_mean": 50, "sigma_belief": 10, "window": [30, 70], "anchors": {"pair": {"low": 40, "high": 60}}, "seed": 99}"#).unwrap();
    let second = dir.path().join("second");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&second)]);
    let b = second.join("data.csv");
    let out = dir.path().join("placebo");
    ok(&["placebo", "--data", s(&a), "--data", s(&b), "--schema", s(&schema), "--out", s(&out)]);
    let r = report(&out);
    let rows = r["result"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["cells"].as_array().unwrap().len(), 2);
    assert_eq!(r["result"]["columns"][0], "data:high");
    assert_eq!(r["result"]["columns"][1], "data_2:high");
    // own-experiment cells are strong
    assert!(rows[0]["cells"][0]["p"].as_f64().unwrap() < 1e-6);
    assert!(rows[1]["cells"][1]["p"].as_f64().unwrap() < 1e-6);

    let single = abcd(&["placebo", "--data", s(&a), "--schema", s(&schema), "--out", s(&out)]);
    assert!(!single.status.success());
    let err: Value = serde_json::from_slice(&single.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "alignment");
}

#[test]
fn decay_from_two_wave_simulation() {
    let dir = TempDir::new().unwrap();
    let (data, schema) = simulated(&dir.path().join("sim"), &["--waves", "0,8.8"]);
    let out = dir.path().join("decay");
    ok(&["decay", "--data", s(&data), "--schema", s(&schema), "--bins", "5-14", "--out", s(&out)]);
    let r = report(&out);
    let ratio = r["result"]["decay_ratio"].as_f64().unwrap();
    let expected = (-8.8f64 / 7.2).exp();
    assert!((ratio - expected).abs() < 0.1, "{ratio} vs {expected}");
    assert_eq!(r["result"]["lagged"][0]["mean_lag"], 9.0);
    assert!(out.join("curves/decay_effects.csv").exists());

    // default bins: everyone sits at lag 9
    let out2 = dir.path().join("decay2");
    ok(&["decay", "--data", s(&data), "--schema", s(&schema), "--out", s(&out2)]);
    let r2 = report(&out2);
    assert_eq!(r2["result"]["lagged"].as_array().unwrap().len(), 1);
    assert_eq!(r2["warnings"].as_array().unwrap().len(), 1);
}

#[test]
fn ingest_excludes_and_transforms() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("donation.csv");
    let mut text = String::from("id,anchor,belief,donate\n");
    for i in 0..40 {
        let anchor = if i % 2 == 0 { "100" } else { "5000" };
        let belief = if i == 3 { 250000 } else { 50 + 37 * i };
        text.push_str(&format!("p{i},{anchor},{belief},{}\n", i % 7));
    }
    text.push_str("p40,,120,3\n");
    fs::write(&csv, text).unwrap();
    let out = dir.path().join("out");
    ok(&["ingest", "--data", s(&csv), "--exclude-above", "100000", "--transform", "log10p1", "--out", s(&out)]);
    let r = report(&out);
    let d = &r["result"]["datasets"][0];
    assert_eq!(d["records"], 40);
    assert_eq!(d["excluded"], 1);
    assert_eq!(d["no_anchor_arm"], true);
    assert_eq!(d["belief_transform"], "Log10Plus1");
    let excl = fs::read_to_string(out.join("data/donation.exclusions.csv")).unwrap();
    assert!(excl.contains("p3,"));

    // written data reloads through its schema
    let out2 = dir.path().join("describe");
    ok(&[
        "describe",
        "--data",
        s(&out.join("data/donation.csv")),
        "--schema",
        s(&out.join("data/donation.schema.json")),
        "--out",
        s(&out2),
    ]);
    let groups = report(&out2)["result"]["datasets"][0]["groups"].as_array().unwrap().len();
    assert_eq!(groups, 3);
}

#[test]
fn errors_are_machine_readable() {
    let out = TempDir::new().unwrap();
    let run = abcd(&["iv", "--data", s(&fixture("weak_first_stage.csv")), "--outcome", "nope", "--out", s(out.path())]);
    assert!(!run.status.success());
    let err: Value = serde_json::from_slice(&run.stderr).expect("stderr is a JSON error block");
    assert_eq!(err["error"]["kind"], "schema");
    assert_eq!(err["error"]["command"], "iv");
    assert!(err["error"]["message"].as_str().unwrap().contains("nope"));

    let run = abcd(&["describe", "--data", "/definitely/missing.csv", "--out", s(out.path())]);
    assert!(!run.status.success());
    let err: Value = serde_json::from_slice(&run.stderr).unwrap();
    assert!(err["error"]["message"].as_str().is_some());
}

#[test]
fn ordinal_outcomes_are_dichotomized() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("ord.csv");
    let mut text = String::from("id,anchor,belief,finances\n");
    for i in 0..60 {
        let high = i % 2 == 1;
        let belief = if high { 60.0 } else { 20.0 } + (i % 10) as f64;
        text.push_str(&format!("p{i},{},{belief},{}\n", if high { 80 } else { 10 }, 1 + i % 5));
    }
    fs::write(&csv, text).unwrap();
    let schema = dir.path().join("ord.schema.json");
    fs::write(
        &schema,
        r#"{"id_col": "id", "condition_col": "anchor", "belief_col": "belief",
            "outcome_cols": [{"name": "finances", "type": "ordinal", "levels": 5}]}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    ok(&["iv", "--data", s(&csv), "--schema", s(&schema), "--out", s(&out)]);
    let r = report(&out);
    let d = &r["result"]["datasets"][0];
    assert_eq!(d["dichotomized"][0]["outcome"], "finances");
    assert_eq!(d["dichotomized"][0]["dichotomized_above"], 3);
    let mean = d["columns"][0]["outcome_mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mean));
}
