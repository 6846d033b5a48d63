use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cf-effects"))
        .args(args)
        .env("CF_EFFECTS_THREADS", "1")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn small_spec(dir: &Path) -> String {
    let path = dir.join("spec.json");
    let spec = serde_json::json!({
        "num_answers": 6,
        "num_qtypes": 2,
        "context_map": [[0, 1, 2], [3, 4, 5]],
        "train_prior": [[0.8, 0.1, 0.1], [0.1, 0.8, 0.1]],
        "test_prior": [[0.1, 0.45, 0.45], [0.45, 0.1, 0.45]],
        "visual_snr": 1.5,
        "spurious_strength": 0.8,
        "sizes": {"train": 300, "val": 60, "test": 60},
        "seed": 4
    });
    std::fs::write(&path, spec.to_string()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn checksums(dir: &Path) -> Vec<String> {
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    manifest["splits"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["sha256"].as_str().unwrap().to_owned())
        .collect()
}

#[test]
fn gen_data_is_reproducible_and_seed_sensitive() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = small_spec(tmp.path());
    let dir = |n: &str| tmp.path().join(n).to_str().unwrap().to_owned();
    for (name, seed) in [("a", "7"), ("b", "7"), ("c", "8")] {
        let out = cf(&[
            "gen-data",
            "--config",
            &spec,
            "--seed",
            seed,
            "--out",
            &dir(name),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = checksums(&tmp.path().join("a"));
    assert_eq!(a.len(), 3);
    assert_eq!(a, checksums(&tmp.path().join("b")));
    assert_ne!(a, checksums(&tmp.path().join("c")));
    for file in [
        "train.jsonl",
        "val.jsonl",
        "test.jsonl",
        "prior_shift.csv",
        "answer_histogram.csv",
    ] {
        assert!(tmp.path().join("a").join(file).is_file(), "{file}");
    }
}

#[test]
fn usage_and_config_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&cf(&["frobnicate"])), 2);
    assert_eq!(code(&cf(&[])), 2);
    assert_eq!(code(&cf(&["eval", "--data", "x"])), 2);

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"num_answers": 2}"#).unwrap();
    let out = tmp.path().join("out");
    let run = cf(&[
        "gen-data",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 2);

    let unknown = tmp.path().join("unknown.json");
    std::fs::write(&unknown, r#"{"model": {"strategy": "SUM", "widht": 3}}"#).unwrap();
    let run = cf(&[
        "train",
        "--config",
        unknown.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 2);
}

#[test]
fn refuses_to_overwrite_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = small_spec(tmp.path());
    let out = tmp.path().join("data");
    std::fs::create_dir(&out).unwrap();
    std::fs::write(out.join("keep.txt"), "precious").unwrap();
    let run = cf(&[
        "gen-data",
        "--config",
        &spec,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 1);
    assert!(!out.join("train.jsonl").exists());
    let run = cf(&[
        "gen-data",
        "--config",
        &spec,
        "--out",
        out.to_str().unwrap(),
        "--force",
    ]);
    assert_eq!(code(&run), 0);
    assert!(out.join("train.jsonl").exists());
}

#[test]
fn train_eval_and_sweep_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = small_spec(tmp.path());
    let path = |n: &str| tmp.path().join(n).to_str().unwrap().to_owned();
    assert_eq!(
        code(&cf(&[
            "gen-data",
            "--config",
            &spec,
            "--out",
            &path("data")
        ])),
        0
    );

    let run = cf(&[
        "train",
        "--data",
        &path("data"),
        "--epochs",
        "2",
        "--out",
        &path("run"),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let summary: Value = serde_json::from_str(
        &std::fs::read_to_string(tmp.path().join("run/summary.json")).unwrap(),
    )
    .unwrap();
    let hash = summary["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    let log = std::fs::read_to_string(tmp.path().join("run/train_log.csv")).unwrap();
    assert!(log.starts_with(&format!("# config_hash={hash} seed=0\n")));
    assert_eq!(log.lines().count(), 2 + 2);

    let ckpt = path("run/checkpoint.json");
    let run = cf(&[
        "eval",
        "--checkpoint",
        &ckpt,
        "--data",
        &path("data"),
        "--modes",
        "tie,posterior",
        "--out",
        &path("eval"),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("eval/eval.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("tie,all,")));
    assert!(tmp.path().join("eval/distribution_posterior.csv").is_file());

    let run = cf(&[
        "eval",
        "--checkpoint",
        &ckpt,
        "--data",
        &path("data"),
        "--modes",
        "median",
        "--out",
        &path("e2"),
    ]);
    assert_eq!(code(&run), 2);

    let run = cf(&[
        "sweep-c",
        "--checkpoint",
        &ckpt,
        "--data",
        &path("data"),
        "--c-values=-30,0,30",
        "--out",
        &path("sweep"),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let sweep = std::fs::read_to_string(tmp.path().join("sweep/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 2 + 4);

    std::fs::write(tmp.path().join("broken.json"), "{\"header\": 1").unwrap();
    let run = cf(&[
        "eval",
        "--checkpoint",
        &path("broken.json"),
        "--data",
        &path("data"),
        "--out",
        &path("e3"),
    ]);
    assert_eq!(code(&run), 2);
    let run = cf(&[
        "eval",
        "--checkpoint",
        &path("missing.json"),
        "--data",
        &path("data"),
        "--out",
        &path("e4"),
    ]);
    assert_eq!(code(&run), 1);
}

#[test]
fn compare_writes_grid_and_ablation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("experiment.json");
    let spec: Value =
        serde_json::from_str(&std::fs::read_to_string(small_spec(tmp.path())).unwrap()).unwrap();
    let experiment =
        serde_json::json!({"task": spec, "model": {"hidden": 8}, "train": {"epochs": 1}});
    std::fs::write(&cfg, experiment.to_string()).unwrap();
    let out = tmp.path().join("cmp");
    let run = cf(&[
        "compare",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let grid = std::fs::read_to_string(out.join("grid.csv")).unwrap();
    for strategy in ["HM,", "SUM,", "RUBI,", "LM,"] {
        assert!(grid.lines().any(|l| l.starts_with(strategy)), "{strategy}");
    }
    assert!(grid.lines().nth(1).unwrap().contains("posterior,nie,tie"));
    let ablation = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(ablation.lines().count(), 2 + 3);
}
