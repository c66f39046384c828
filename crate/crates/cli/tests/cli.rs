//! End-to-end checks of the binary: exit codes, file outputs, determinism.

use std::path::Path;
use std::process::{Command, Output};

fn heterrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_heterrec"))
        .args(args)
        .output()
        .expect("spawn heterrec")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

const MINI_SPEC: &str = r#"{
    "n_items": 30, "n_users": 12, "n_categories": 3, "n_brands": 2,
    "len_min": 4, "len_max": 6, "n_clusters": 4, "price_bins": 4
}"#;

const MINI_TRAIN: &str = r#"{
    "model": {"d_f": 8, "d_k": 8, "heads": 2, "n1": 1, "n2": 1,
              "t_max": 5, "n_step": 2, "time_buckets": 8},
    "batch_size": 4, "epochs": 2, "cutoffs": [5, 10]
}"#;

#[test]
fn gen_synthetic_then_train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    let train = dir.path().join("train.json");
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let eval = dir.path().join("eval");
    write(&spec, MINI_SPEC);
    write(&train, MINI_TRAIN);

    let out = heterrec(&[
        "gen-synthetic",
        "--config",
        spec.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    assert!(data.join("items.jsonl").exists());
    assert!(data.join("interactions.jsonl").exists());
    assert!(data.join("rule.json").exists());

    let out = heterrec(&[
        "train",
        "--config",
        train.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);
    assert!(run.join("timing.json").exists());
    assert!(run.join("checkpoint.json").exists());
    assert!(run.join("checkpoint.bin").exists());

    let out = heterrec(&[
        "evaluate",
        "--config",
        train.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        run.join("checkpoint").to_str().unwrap(),
        "--out",
        eval.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval.join("eval.json")).unwrap()).unwrap();
    let r10 = report["recall"]["10"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r10));
}

#[test]
fn gen_synthetic_is_deterministic_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    write(&spec, MINI_SPEC);
    let gen = |out: &Path, seed: Option<&str>| {
        let mut args = vec![
            "gen-synthetic",
            "--config",
            spec.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ];
        if let Some(s) = seed {
            args.extend(["--seed", s]);
        }
        assert_exit(&heterrec(&args), 0);
    };
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    gen(&a, None);
    gen(&b, None);
    gen(&c, Some("99"));
    for file in ["items.jsonl", "interactions.jsonl", "rule.json"] {
        let bytes = |d: &Path| std::fs::read(d.join(file)).unwrap();
        assert_eq!(bytes(&a), bytes(&b), "{file} differs across equal-seed runs");
    }
    assert_ne!(
        std::fs::read(a.join("interactions.jsonl")).unwrap(),
        std::fs::read(c.join("interactions.jsonl")).unwrap(),
        "seed override had no effect"
    );
}

#[test]
fn prepare_writes_codebook_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    write(&spec, MINI_SPEC);
    let data = dir.path().join("data");
    let prep = dir.path().join("prep");
    assert_exit(
        &heterrec(&["gen-synthetic", "--config", spec.to_str().unwrap(), "--out", data.to_str().unwrap()]),
        0,
    );
    assert_exit(
        &heterrec(&["prepare", "--data", data.to_str().unwrap(), "--out", prep.to_str().unwrap()]),
        0,
    );
    for file in ["items.jsonl", "interactions.jsonl", "codebook.json", "stats.json"] {
        assert!(prep.join(file).exists(), "missing {file}");
    }
    assert_exit(
        &heterrec(&[
            "fit-codebook",
            "--items",
            data.join("items.jsonl").to_str().unwrap(),
            "--out",
            prep.to_str().unwrap(),
        ]),
        0,
    );
}

#[test]
fn grad_check_passes_clean_and_fails_corrupted() {
    let out = heterrec(&["grad-check", "--seeds", "1"]);
    assert_exit(&out, 0);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("PASS relu"));
    assert!(text.contains("PASS hct_block"));
    assert!(text.contains("PASS lmp_graph"));
    assert!(!text.contains("FAIL"));

    let out = heterrec(&["grad-check", "--seeds", "1", "--corrupt-backward"]);
    assert_exit(&out, 1);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("FAIL relu"));
}

#[test]
fn bad_invocations_map_to_documented_exit_codes() {
    assert_exit(&heterrec(&["no-such-subcommand"]), 2);

    let dir = tempfile::tempdir().unwrap();
    let broken = dir.path().join("broken.json");
    write(&broken, "{not json");
    let out = heterrec(&[
        "gen-synthetic",
        "--config",
        broken.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_exit(&out, 2);

    let out = heterrec(&[
        "train",
        "--data",
        dir.path().join("missing").to_str().unwrap(),
        "--out",
        dir.path().join("y").to_str().unwrap(),
    ]);
    assert_exit(&out, 1);

    let out = heterrec(&["grad-check", "--seeds", "0"]);
    assert_exit(&out, 2);
}
