use std::path::Path;
use std::process::{Command, Output};

fn rrm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rrm"))
        .args(args)
        .current_dir(dir)
        .env_remove("RRM_SEED")
        .output()
        .expect("rrm runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn generate_is_byte_identical_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| ["generate", "--k", "10", "--count", "300", "--seed", "7", "--out", out];
    ok(&rrm(dir.path(), &args("a")));
    ok(&rrm(dir.path(), &args("b")));
    for file in ["manifest.json", "samples.ndjson"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs");
    }
}

#[test]
fn default_universe_is_logged() {
    let dir = tempfile::tempdir().unwrap();
    let out = rrm(dir.path(), &["generate", "--count", "10", "--out", "d"]);
    ok(&out);
    assert!(stderr(&out).contains("cardinality 4096"), "{}", stderr(&out));
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = rrm(dir.path(), &["generate", "--k", "0", "--count", "10", "--out", "d"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(!dir.path().join("d").exists());

    std::fs::write(dir.path().join("bad.json"), r#"{"subset": {"kk": 3}}"#).unwrap();
    let out = rrm(dir.path(), &["generate", "--config", "bad.json", "--out", "d"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("subset.kk"), "{}", stderr(&out));

    let out = rrm(dir.path(), &["generate", "--subcarriers", "8", "--count", "10", "--out", "d"]);
    assert_eq!(out.status.code(), Some(2), "l_max 32 cannot fit 8 subcarriers");

    let out = rrm(dir.path(), &["bench", "no-such-experiment"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_comes_from_flag_then_file_then_env() {
    let dir = tempfile::tempdir().unwrap();
    let seed_of = |name: &str| -> u64 {
        let text = std::fs::read_to_string(dir.path().join(name).join("manifest.json")).unwrap();
        serde_json::from_str::<serde_json::Value>(&text).unwrap()["seed"].as_u64().unwrap()
    };
    ok(&rrm(dir.path(), &["generate", "--count", "5", "--out", "default"]));
    assert_eq!(seed_of("default"), 1);

    let env = Command::new(env!("CARGO_BIN_EXE_rrm"))
        .args(["generate", "--count", "5", "--out", "env"])
        .current_dir(dir.path())
        .env("RRM_SEED", "42")
        .output()
        .unwrap();
    ok(&env);
    assert_eq!(seed_of("env"), 42);

    std::fs::write(dir.path().join("seed.json"), r#"{"seed": 9}"#).unwrap();
    ok(&rrm(dir.path(), &["generate", "--config", "seed.json", "--count", "5", "--out", "file"]));
    assert_eq!(seed_of("file"), 9);
    ok(&rrm(dir.path(), &["generate", "--config", "seed.json", "--seed", "3", "--count", "5", "--out", "flag"]));
    assert_eq!(seed_of("flag"), 3);
}

#[test]
fn training_needs_labels() {
    let dir = tempfile::tempdir().unwrap();
    ok(&rrm(dir.path(), &["generate", "--count", "50", "--out", "d"]));
    let out = rrm(dir.path(), &["train", "--dataset", "d", "--preset", "sm1", "--out", "ck.json"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("dataset not labeled"), "{}", stderr(&out));

    let out = rrm(dir.path(), &["train", "--dataset", "d", "--preset", "nope", "--out", "ck.json"]);
    assert_eq!(out.status.code(), Some(2));
    let out = rrm(dir.path(), &["train", "--dataset", "missing", "--preset", "sm1", "--out", "ck.json"]);
    assert!(!out.status.success());
}

#[test]
fn sm1_round_trip_reports_a_percentage() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&rrm(p, &["generate", "--subcarriers", "8", "--l-max", "8", "--m-max", "16", "--sigma2", "4e-19", "--count", "200", "--out", "d"]));
    ok(&rrm(p, &["label", "--dataset", "d"]));
    ok(&rrm(p, &["train", "--dataset", "d", "--preset", "sm1", "--epochs", "3", "--out", "ck/sm1.json"]));
    assert!(p.join("ck/sm1.history.csv").exists());
    let text = ok(&rrm(p, &["eval", "--dataset", "d", "--checkpoint", "ck/sm1.json"]));
    let r_bar: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("R_bar: "))
        .and_then(|v| v.trim_end_matches(" %").parse().ok())
        .unwrap_or_else(|| panic!("no R_bar line in {text}"));
    assert!(r_bar > 0.0 && r_bar <= 100.0, "{r_bar}");
    assert!(text.contains("t3': "), "{text}");
}

#[test]
fn bench_writes_one_row_per_k() {
    let dir = tempfile::tempdir().unwrap();
    let config = serde_json::json!({"experiment": {
        "subcarriers": [4], "k": [1, 2, 3], "l_max": 2, "m_max": 3,
        "train_sizes": [40], "val_size": 10, "test_size": 10, "hidden_width": 8,
        "train": {"max_epochs": 1, "patience": 1},
    }});
    std::fs::write(dir.path().join("c.json"), config.to_string()).unwrap();
    ok(&rrm(dir.path(), &["bench", "cs1-nonstat", "--config", "c.json", "--out", "res", "--run-id", "r"]));
    let csv = std::fs::read_to_string(dir.path().join("res/cs1-nonstat/r/cs1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3, "{csv}");
    let report = ok(&rrm(dir.path(), &["report", "--results", "res"]));
    assert!(report.contains("cs1.csv: 3 rows"), "{report}");
}

#[test]
fn help_shows_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&rrm(dir.path(), &["generate", "--help"]));
    for needle in ["--l-max", "[default: 32]", "[default: 128]", "[default: 10]", "[default: 5000]", "--jobs"] {
        assert!(text.contains(needle), "missing {needle} in\n{text}");
    }
    let text = ok(&rrm(dir.path(), &["dqn", "--help"]));
    assert!(text.contains("[default: 5000]") && text.contains("[default: sc]"), "{text}");
    let text = ok(&rrm(dir.path(), &["--help"]));
    assert!(text.contains("RRM_SEED"), "{text}");
}
