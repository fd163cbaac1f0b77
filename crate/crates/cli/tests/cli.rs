use std::fs;
use std::process::{Command, Output};

fn dfn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfn")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
seeds = [1]
filter_pool_size = 500
raw_pool_size = 3000
records_per_shard = 1000
dfn_samples_seen = 4096
induced_samples_seen = 4096
eval_id_size = 200
eval_shift_size = 100
eval_retrieval_size = 256
"#;

#[test]
fn help_lists_every_command() {
    let o = dfn(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for c in ["gen", "train-dfn", "calibrate", "filter", "induce", "eval", "exp", "bench", "run-all"] {
        assert!(text.contains(c), "{c} missing from help");
    }
    let o = dfn(&["exp", "--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    for c in ["poison-sweep", "filter-vs-downstream", "interventions", "robustness"] {
        assert!(text.contains(c), "{c} missing from exp help");
    }
}

#[test]
fn threshold_and_keep_fraction_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = dfn(&["--out", out, "filter", "--keep-fraction", "0.2", "--threshold", "0.1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("cannot be used with"), "{}", stderr(&o));
}

#[test]
fn rejects_bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    let out = dir.path().join("out");
    for (text, needle) in [
        ("no_such_key = 1\n", "unknown field"),
        ("seeds = []\n", "seeds must not be empty"),
        ("keep_fraction = 1.5\n", "keep_fraction"),
    ] {
        fs::write(&cfg, text).unwrap();
        let o = dfn(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "gen"]);
        assert!(!o.status.success(), "{text}");
        assert!(stderr(&o).contains(needle), "{text}: {}", stderr(&o));
    }
    let o = Command::new(env!("CARGO_BIN_EXE_dfn"))
        .args(["--out", out.to_str().unwrap(), "gen"])
        .env("DFN_WORKERS", "0")
        .output()
        .unwrap();
    assert!(!o.status.success());
}

#[test]
fn locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(".dfn.lock"), "1\n").unwrap();
    let o = dfn(&["--out", dir.path().to_str().unwrap(), "gen"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("locked"), "{}", stderr(&o));
}

#[test]
fn stages_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("run");
    let base = ["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--workers", "2"];
    for stage in [&["gen"][..], &["train-dfn"], &["calibrate", "--keep-fraction", "0.2"], &["filter", "--threshold", "0.5"], &["induce"], &["eval"]] {
        let args: Vec<&str> = base.iter().chain(stage).copied().collect();
        let o = dfn(&args);
        assert!(o.status.success(), "{stage:?}: {}", stderr(&o));
    }
    for f in [
        "filter_pool/manifest.jsonl",
        "raw_pool/manifest.jsonl",
        "dfn.ckpt",
        "dfn_train_log.csv",
        "calibration.json",
        "induced_pool/manifest.jsonl",
        "filter_report.json",
        "induced.ckpt",
        "eval_report.json",
        "config.filter.toml",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert!(!out.join(".dfn.lock").exists());
    let snapshot = fs::read_to_string(out.join("config.filter.toml")).unwrap();
    assert!(snapshot.contains("threshold = 0.5"), "{snapshot}");
    let report = fs::read_to_string(out.join("filter_report.json")).unwrap();
    assert!(report.contains("\"mode\": \"threshold\""), "{report}");
}
