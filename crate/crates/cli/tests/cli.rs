use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 11
[data]
n_per_class = 50
n_val_per_class = 20
n_test_per_class = 20
[score]
hidden = [16, 16]
iterations = 600
[classifier]
epochs = 200
[sde]
n_steps = 100
every = 50
[barrier]
n_per_pair = 3
iterations = 10
[generate]
source_stride = 10
[self_correct]
epochs = 2
trials = 2
baseline_epochs = 2
[ablation]
n_per_direction = 4
seeds = 2
"#;

const STAGES: [&str; 9] = [
    "gen-data",
    "train-score",
    "train-classifier",
    "probe-barrier",
    "generate",
    "self-correct",
    "ablate-refinement",
    "evaluate",
    "plot",
];

fn dca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dca")).args(args).output().expect("binary runs")
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn run_pipeline(cfg: &Path, out: &Path, extra: &[&str]) {
    for stage in STAGES {
        let mut args = vec!["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--deterministic"];
        args.extend_from_slice(extra);
        args.push(stage);
        let o = dca(&args);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

fn error_json(o: &Output) -> serde_json::Value {
    let line = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(line.trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {line}"))
}

/// Relative path to contents for every file with one of `exts`.
fn snapshot(root: &Path, exts: &[&str]) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if exts.iter().any(|x| p.extension().is_some_and(|e| e == *x)) {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn probe_without_score_model_is_a_missing_artifact() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    let o = dca(&["-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "probe-barrier"]);
    assert_eq!(o.status.code(), Some(2));
    let j = error_json(&o);
    assert_eq!(j["error"], "missing_artifact");
    assert_eq!(j["producer"], "gen-data");

    assert!(dca(&["-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "gen-data"]).status.success());
    let o = dca(&["-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "probe-barrier"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["producer"], "train-score");
}

#[test]
fn config_errors_exit_with_usage_code() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    let o = dca(&["-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--sde.lambda=1.7", "gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_json(&o)["message"].as_str().unwrap().contains("sde.lambda"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = 1\n[sde]\nkapa = 2.0\n").unwrap();
    let o = dca(&["-c", bad.to_str().unwrap(), "gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    let j = error_json(&o);
    assert_eq!(j["error"], "config");
    assert_eq!(j["line"], 3);

    let o = dca(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_json(&o)["error"], "usage");
}

#[test]
fn override_flag_wins_over_file() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    let o = dca(&["-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--self_correct.lr=1e-4", "--seed", "5", "gen-data"]);
    assert!(o.status.success());
    let resolved = fs::read_to_string(out.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("lr = 0.0001"), "{resolved}");
    assert!(resolved.contains("seed = 5"));
}

#[test]
fn pipeline_is_byte_identical_across_job_counts() {
    let (dir, cfg) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_pipeline(&cfg, &a, &["--jobs", "1"]);
    run_pipeline(&cfg, &b, &["--jobs", "3"]);
    // Exported trajectories are part of the contract too.
    for out in [&a, &b] {
        let o = dca(&["-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "generate", "--input", "5"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (sa, sb) = (snapshot(&a, &["csv", "json", "svg", "dca"]), snapshot(&b, &["csv", "json", "svg", "dca"]));
    assert!(sa.len() >= 20, "{:?}", sa.keys());
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(v == &sb[k], "{k} differs between --jobs 1 and --jobs 3");
    }
    assert!(sa.keys().any(|k| k.ends_with("_trajectory.csv")));
}

#[test]
fn evaluate_refuses_mixed_configs_unless_forced() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    run_pipeline(&cfg, &out, &[]);
    let o = dca(&["-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--self_correct.epochs=1", "self-correct"]);
    assert!(o.status.success());
    let o = dca(&["-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "evaluate"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"], "config_hash_mismatch");
    let o = dca(&["-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "evaluate", "--force"]);
    assert!(o.status.success());
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(out.join("reports/metrics.json")).unwrap()).unwrap();
    assert!(metrics["metadata"]["foreign_artifacts"].as_str().unwrap().contains("reports/self_correct.json"));
}

#[test]
fn checkpoint_version_mismatch_is_reported() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    for stage in ["gen-data", "train-score"] {
        assert!(dca(&["-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), stage]).status.success());
    }
    let path = out.join("models/score.dca");
    let bytes = fs::read(&path).unwrap();
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let at = text.find("\"format_version\":1").expect("version field");
    let mut patched = bytes.clone();
    patched[at + "\"format_version\":".len()] = b'7';
    fs::write(&path, patched).unwrap();
    let o = dca(&["-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "probe-barrier"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"], "checkpoint_version");
}

#[test]
fn svg_timestamp_only_without_deterministic() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    assert!(dca(&["-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "gen-data"]).status.success());
    assert!(dca(&["-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "plot"]).status.success());
    assert!(fs::read_to_string(out.join("plots/data.svg")).unwrap().contains("<!-- rendered at"));
    assert!(dca(&["-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--deterministic", "plot"]).status.success());
    assert!(!fs::read_to_string(out.join("plots/data.svg")).unwrap().contains("<!--"));
}
