//! End-to-end command-line checks: generation determinism, training
//! artifacts, prediction output, and failure modes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_risecast"))
}

fn fixture_spec() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/desk_small.json")
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Recursive byte-level digest of a directory (FNV over sorted paths and
/// contents).
fn dir_digest(dir: &Path) -> u64 {
    fn walk(dir: &Path, files: &mut Vec<PathBuf>) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(&path, files);
            } else {
                files.push(path);
            }
        }
    }
    let mut files = Vec::new();
    walk(dir, &mut files);
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut absorb = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    };
    for path in files {
        absorb(path.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        absorb(&fs::read(&path).unwrap());
    }
    hash
}

#[test]
fn gen_data_matches_fixture_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("u1");
    let b = dir.path().join("u2");
    for out in [&a, &b] {
        let output = run_ok(bin().args([
            "gen-data",
            "--spec",
            fixture_spec().to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]));
        let stderr = String::from_utf8_lossy(&output.stderr);
        assert!(stderr.contains("20 counties"), "summary: {stderr}");
        assert!(stderr.contains("60 days"), "summary: {stderr}");
        assert!(stderr.contains("8 feature groups"), "summary: {stderr}");
    }
    assert_eq!(dir_digest(&a), dir_digest(&b), "same seed, same bytes");

    // A different seed changes the universe.
    let c = dir.path().join("u3");
    run_ok(bin().args([
        "gen-data",
        "--spec",
        fixture_spec().to_str().unwrap(),
        "--out",
        c.to_str().unwrap(),
        "--seed",
        "999",
    ]));
    assert_ne!(dir_digest(&a), dir_digest(&c));
}

#[test]
fn gen_data_rejects_bad_spec_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.json");
    fs::write(&spec, "{ \"name\": \"x\", \"counties\": ").unwrap();
    let out = bin()
        .args([
            "gen-data",
            "--spec",
            spec.to_str().unwrap(),
            "--out",
            dir.path().join("u").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("parsing spec"), "stderr: {stderr}");
}

#[test]
fn missing_artifact_is_a_usage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "predict",
            "--artifact",
            dir.path().join("none.json").to_str().unwrap(),
            "--universe",
            dir.path().join("nouniverse").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
    // No data on stdout in the failure path.
    assert!(out.stdout.is_empty());
}

/// Slow path: generate, train briefly, predict, analyze. Shares one
/// universe + artifact across the checks.
#[test]
fn pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let universe = dir.path().join("universe");
    run_ok(bin().args([
        "gen-data",
        "--spec",
        fixture_spec().to_str().unwrap(),
        "--out",
        universe.to_str().unwrap(),
    ]));

    // Short fixed-hp training, twice with the same seed: identical bytes.
    let model_a = dir.path().join("a.json");
    let model_b = dir.path().join("b.json");
    for model in [&model_a, &model_b] {
        run_ok(bin().args([
            "train",
            "--universe",
            universe.to_str().unwrap(),
            "--out",
            model.to_str().unwrap(),
            "--epochs",
            "8",
            "--embed-dim",
            "8",
            "--snn-width",
            "16",
            "--snn-depth",
            "1",
            "--seed",
            "11",
        ]));
    }
    let bytes_a = fs::read(&model_a).unwrap();
    assert_eq!(bytes_a, fs::read(&model_b).unwrap(), "same seed, same artifact");
    assert!(model_a.with_extension("report.json").exists());

    // Zero learning rate warns and still writes an artifact.
    let frozen = dir.path().join("frozen.json");
    let out = run_ok(bin().args([
        "train",
        "--universe",
        universe.to_str().unwrap(),
        "--out",
        frozen.to_str().unwrap(),
        "--epochs",
        "2",
        "--learning-rate",
        "0",
        "--seed",
        "11",
    ]));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    assert!(frozen.exists());

    // Predictions on stdout; class probabilities sum to 1 per row.
    let out = run_ok(bin().args([
        "predict",
        "--artifact",
        model_a.to_str().unwrap(),
        "--universe",
        universe.to_str().unwrap(),
        "--counties",
        "c000,c007",
        "--out",
        "-",
    ]));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let mut lines = stdout.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("county,date,prob_class_0"));
    let mut rows = 0;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        let probs: Vec<f64> = fields[2..6].iter().map(|f| f.parse().unwrap()).collect();
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9, "row {line}");
        rows += 1;
    }
    // 2 counties x (41 in-span + 7 projected) label dates.
    assert_eq!(rows, 2 * 48);

    // Prediction for a date lacking history is omitted with a warning.
    let out = run_ok(bin().args([
        "predict",
        "--artifact",
        model_a.to_str().unwrap(),
        "--universe",
        universe.to_str().unwrap(),
        "--counties",
        "c000",
        "--from",
        "2020-04-06",
        "--to",
        "2020-04-24",
        "--out",
        "-",
    ]));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("omitted for missing history"), "stderr: {stderr}");
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1 + 1, "only 2020-04-24 predictable");

    // Analysis reports exist and are deterministic.
    let reports = dir.path().join("reports");
    run_ok(bin().args([
        "importance",
        "--artifact",
        model_a.to_str().unwrap(),
        "--universe",
        universe.to_str().unwrap(),
        "--out",
        reports.to_str().unwrap(),
        "--repeats",
        "2",
        "--seed",
        "5",
    ]));
    let first = fs::read(reports.join("importance.csv")).unwrap();
    run_ok(bin().args([
        "importance",
        "--artifact",
        model_a.to_str().unwrap(),
        "--universe",
        universe.to_str().unwrap(),
        "--out",
        reports.to_str().unwrap(),
        "--repeats",
        "2",
        "--seed",
        "5",
    ]));
    assert_eq!(first, fs::read(reports.join("importance.csv")).unwrap());

    run_ok(bin().args([
        "timesteps",
        "--artifact",
        model_a.to_str().unwrap(),
        "--universe",
        universe.to_str().unwrap(),
        "--out",
        reports.to_str().unwrap(),
        "--repeats",
        "2",
        "--seed",
        "5",
    ]));
    let csv = fs::read_to_string(reports.join("timesteps.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 13, "13-day window");

    run_ok(bin().args([
        "interactions",
        "--artifact",
        model_a.to_str().unwrap(),
        "--universe",
        universe.to_str().unwrap(),
        "--out",
        reports.to_str().unwrap(),
    ]));
    let csv = fs::read_to_string(reports.join("interactions.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 28, "8 groups -> 28 pairs");

    // Registry mismatch: artifact vs a differently-shaped universe.
    let other = dir.path().join("other");
    let mut spec: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fixture_spec()).unwrap()).unwrap();
    spec["census_features"] = serde_json::json!(3);
    let other_spec = dir.path().join("other_spec.json");
    fs::write(&other_spec, serde_json::to_string(&spec).unwrap()).unwrap();
    run_ok(bin().args([
        "gen-data",
        "--spec",
        other_spec.to_str().unwrap(),
        "--out",
        other.to_str().unwrap(),
    ]));
    let out = bin()
        .args([
            "predict",
            "--artifact",
            model_a.to_str().unwrap(),
            "--universe",
            other.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("registries differ"), "stderr: {stderr}");
    assert!(stderr.contains("census"), "diff names the group: {stderr}");
}

#[test]
fn tune_writes_trial_log_and_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let universe = dir.path().join("universe");
    run_ok(bin().args([
        "gen-data",
        "--spec",
        fixture_spec().to_str().unwrap(),
        "--out",
        universe.to_str().unwrap(),
    ]));

    // Keep trials cheap: tiny epoch budget via the config file.
    let config = dir.path().join("config.json");
    fs::write(
        &config,
        r#"{ "seed": 5, "hyperparams": { "embed_dim": 8, "snn_depth": 1, "snn_width": 16,
             "dropout_rate": 0.05, "learning_rate": 0.002, "lambda_ce": 1.0,
             "batch_size": 64, "epochs_max": 4 } }"#,
    )
    .unwrap();

    let model = dir.path().join("tuned.json");
    run_ok(bin().args([
        "tune",
        "--universe",
        universe.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--budget",
        "30",
        "--config",
        config.to_str().unwrap(),
    ]));
    assert!(model.exists());

    let trials = fs::read_to_string(dir.path().join("tune_trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 1 + 30, "30 trial rows plus header");
    let header = trials.lines().next().unwrap();
    assert!(header.starts_with("trial,embed_dim,snn_depth"));
}

#[test]
fn importance_ranks_the_planted_feature_first() {
    let dir = tempfile::tempdir().unwrap();
    let universe = dir.path().join("universe");
    run_ok(bin().args([
        "gen-data",
        "--spec",
        fixture_spec().to_str().unwrap(),
        "--out",
        universe.to_str().unwrap(),
    ]));
    let model = dir.path().join("model.json");
    run_ok(bin().args([
        "train",
        "--universe",
        universe.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--epochs",
        "30",
        "--seed",
        "7",
    ]));
    let reports = dir.path().join("reports");
    run_ok(bin().args([
        "importance",
        "--artifact",
        model.to_str().unwrap(),
        "--universe",
        universe.to_str().unwrap(),
        "--out",
        reports.to_str().unwrap(),
        "--seed",
        "7",
    ]));
    let csv = fs::read_to_string(reports.join("importance.csv")).unwrap();
    let first_row = csv.lines().nth(1).unwrap();
    assert!(
        first_row.starts_with("visitation,visitation_0,"),
        "top importance row: {first_row}"
    );
}

#[test]
fn check_grads_subcommand_passes() {
    let out = run_ok(bin().args(["check-grads", "--seed", "3"]));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("gradient check passed"), "stderr: {stderr}");
}
