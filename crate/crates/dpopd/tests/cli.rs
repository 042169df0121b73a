//! End-to-end checks of the `dpopd` binary: every subcommand, the run-dir
//! layout, reproducibility across reruns, and the exit-code contract
//! (0 success, 2 usage/config, 3 runtime).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dpopd"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_str(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf-8 stdout")
}

fn assert_code(out: &Output, want: i32) {
    assert_eq!(
        out.status.code(),
        Some(want),
        "exit code mismatch; stderr:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn sha256_hex(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).expect("readable file")))
}

/// A corpus small enough that every training run below takes a second or two.
fn gen_tiny_data(dir: &Path, seed: u64) -> Output {
    run(&[
        "--seed",
        &seed.to_string(),
        "--out-dir",
        dir.to_str().unwrap(),
        "gen-data",
        "--vocab-size",
        "16",
        "--num-codes",
        "2",
        "--order",
        "1",
        "--n-train",
        "60",
        "--n-valid",
        "12",
        "--n-test",
        "12",
        "--n-public",
        "40",
        "--prompt-len",
        "4",
        "--total-len",
        "16",
    ])
}

fn tiny_config(data: &Path, out_dir: &Path, method: &str, seed: u64) -> String {
    format!(
        r#"{{
  "version": 1,
  "method": "{method}",
  "data": {{
    "train": "{d}/train.corpus",
    "valid": "{d}/valid.corpus",
    "test": "{d}/test.corpus"
  }},
  "model": {{
    "student": {{ "context": 18, "embed_dim": 4, "hidden_dim": 8, "init_scale": 0.1 }},
    "teacher": {{ "kind": "oracle", "path": "{d}/chain.json" }}
  }},
  "distill": {{ "beta": 0.5, "tau_d": 1.0, "family": "linear-kl", "gamma": 0.0 }},
  "dp": {{ "sigma": 1.2, "c": 1.0, "b": 10, "steps": 25, "learning_rate": 0.2 }},
  "rollout": {{ "lambda": 0.5, "max_new_tokens": 6, "temperature": 1.0 }},
  "run": {{
    "seed": {seed},
    "deterministic": true,
    "eval_interval": 10,
    "out_dir": "{o}",
    "eval_prompts": 4,
    "eval_rollouts": 1
  }}
}}"#,
        d = data.to_str().unwrap(),
        o = out_dir.to_str().unwrap(),
    )
}

fn write_config(path: &Path, body: &str) {
    fs::write(path, body).expect("config written");
}

// ---------------------------------------------------------------------------
// gen-data

#[test]
fn gen_data_writes_hashed_corpus_files() {
    let tmp = TempDir::new().unwrap();
    let d1 = tmp.path().join("a");
    let out = gen_tiny_data(&d1, 7);
    assert_code(&out, 0);

    let text = stdout_str(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5, "one hash line per written file:\n{text}");
    for name in [
        "chain.json",
        "train.corpus",
        "valid.corpus",
        "test.corpus",
        "public.corpus",
    ] {
        let path = d1.join(name);
        assert!(path.exists(), "{name} missing");
        let line = lines
            .iter()
            .find(|l| l.ends_with(name))
            .unwrap_or_else(|| panic!("no hash line for {name}"));
        let printed = line.split_whitespace().next().unwrap();
        assert_eq!(printed, sha256_hex(&path), "printed hash matches {name}");
    }

    let d2 = tmp.path().join("b");
    let again = gen_tiny_data(&d2, 7);
    assert_code(&again, 0);
    for name in ["chain.json", "train.corpus", "public.corpus"] {
        assert_eq!(
            sha256_hex(&d1.join(name)),
            sha256_hex(&d2.join(name)),
            "{name} differs"
        );
    }

    let d3 = tmp.path().join("c");
    gen_tiny_data(&d3, 8);
    assert_ne!(
        sha256_hex(&d1.join("train.corpus")),
        sha256_hex(&d3.join("train.corpus"))
    );
}

#[test]
fn gen_data_rejects_empty_split() {
    let tmp = TempDir::new().unwrap();
    let out = run(&[
        "--out-dir",
        tmp.path().to_str().unwrap(),
        "gen-data",
        "--n-train",
        "0",
    ]);
    assert_code(&out, 2);
}

// ---------------------------------------------------------------------------
// train-teacher

#[test]
fn train_teacher_reports_params_and_ppl() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert_code(&gen_tiny_data(&data, 3), 0);

    let params = tmp.path().join("teacher.params");
    let out = run(&[
        "--seed",
        "3",
        "train-teacher",
        "--data",
        data.join("public.corpus").to_str().unwrap(),
        "--out",
        params.to_str().unwrap(),
        "--context",
        "18",
        "--embed-dim",
        "4",
        "--hidden-dim",
        "8",
        "--epochs",
        "3",
        "--batch-size",
        "10",
        "--eval",
        data.join("valid.corpus").to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert!(params.exists());

    let report: Value = serde_json::from_str(&stdout_str(&out)).expect("JSON report");
    assert_eq!(
        report["params"],
        Value::String(params.to_str().unwrap().into())
    );
    let ppl = report["ppl_valid"].as_f64().expect("ppl_valid number");
    assert!(ppl.is_finite() && ppl > 1.0);
}

// ---------------------------------------------------------------------------
// train

#[test]
fn train_produces_run_dir_and_reruns_reproduce() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert_code(&gen_tiny_data(&data, 5), 0);

    let run_dir = tmp.path().join("run1");
    let cfg = tmp.path().join("run1.json");
    write_config(&cfg, &tiny_config(&data, &run_dir, "dp-opd", 5));
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_code(&out, 0);

    let summary: Value = serde_json::from_str(&stdout_str(&out)).expect("summary JSON");
    assert_eq!(summary["method"], "dp-opd");
    assert_eq!(summary["steps_run"], 25);
    assert_eq!(summary["stopped_early"], false);
    assert!(summary["epsilon"].as_f64().unwrap() > 0.0);
    assert!((summary["delta"].as_f64().unwrap() - 1.0 / 60.0).abs() < 1e-15);

    for name in [
        "resolved_config.json",
        "metrics.jsonl",
        "student.params",
        "manifest.json",
    ] {
        assert!(run_dir.join(name).exists(), "{name} missing from run dir");
    }

    // The manifest's hashes match the files on disk.
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"], "resolved_config.json");
    let files: BTreeMap<String, String> =
        serde_json::from_value(manifest["files"].clone()).unwrap();
    assert_eq!(
        files.keys().cloned().collect::<Vec<_>>(),
        vec!["metrics.jsonl", "resolved_config.json", "student.params"]
    );
    for (name, hash) in &files {
        assert_eq!(
            hash,
            &sha256_hex(&run_dir.join(name)),
            "{name} hash drifted"
        );
    }

    // Same config, fresh directory: bit-identical artifacts.
    let run_dir2 = tmp.path().join("run2");
    let cfg2 = tmp.path().join("run2.json");
    write_config(&cfg2, &tiny_config(&data, &run_dir2, "dp-opd", 5));
    assert_code(&run(&["train", "--config", cfg2.to_str().unwrap()]), 0);
    assert_eq!(
        sha256_hex(&run_dir.join("student.params")),
        sha256_hex(&run_dir2.join("student.params"))
    );
    assert_eq!(
        sha256_hex(&run_dir.join("metrics.jsonl")),
        sha256_hex(&run_dir2.join("metrics.jsonl"))
    );

    // Feeding the resolved snapshot back reproduces the same run.
    let run_dir3 = tmp.path().join("run3");
    let replay = run(&[
        "--out-dir",
        run_dir3.to_str().unwrap(),
        "train",
        "--config",
        run_dir.join("resolved_config.json").to_str().unwrap(),
    ]);
    assert_code(&replay, 0);
    assert_eq!(
        sha256_hex(&run_dir.join("student.params")),
        sha256_hex(&run_dir3.join("student.params"))
    );
}

#[test]
fn train_metrics_lines_are_tagged_and_complete() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert_code(&gen_tiny_data(&data, 6), 0);

    let run_dir = tmp.path().join("run");
    let cfg = tmp.path().join("cfg.json");
    write_config(&cfg, &tiny_config(&data, &run_dir, "dp-opd", 6));
    assert_code(&run(&["train", "--config", cfg.to_str().unwrap()]), 0);

    let metrics = fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    let mut steps = 0u64;
    let mut evals = 0u64;
    for line in metrics.lines() {
        let v: Value = serde_json::from_str(line).expect("every line is JSON");
        match v["kind"].as_str().unwrap() {
            "step" => {
                steps += 1;
                assert_eq!(v["step"].as_u64().unwrap(), steps);
                assert!(matches!(v["branch"].as_str().unwrap(), "on" | "off"));
                assert!(v["loss"].as_f64().unwrap().is_finite());
                assert!(v["epsilon"].as_f64().unwrap() > 0.0);
            }
            "eval" => {
                evals += 1;
                assert!(v["ppl_valid"].as_f64().unwrap().is_finite());
                assert!(v["rollout_kl"].as_f64().unwrap().is_finite());
            }
            other => panic!("unexpected kind {other}"),
        }
    }
    assert_eq!(steps, 25);
    assert!(evals >= 2, "eval_interval 10 over 25 steps, saw {evals}");
}

// ---------------------------------------------------------------------------
// eval

#[test]
fn eval_reports_split_tagged_keys() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert_code(&gen_tiny_data(&data, 4), 0);

    let run_dir = tmp.path().join("run");
    let cfg = tmp.path().join("cfg.json");
    write_config(&cfg, &tiny_config(&data, &run_dir, "dpsgd-only", 4));
    assert_code(&run(&["train", "--config", cfg.to_str().unwrap()]), 0);
    let params = run_dir.join("student.params");

    let plain = run(&[
        "eval",
        "--params",
        params.to_str().unwrap(),
        "--data",
        data.join("test.corpus").to_str().unwrap(),
    ]);
    assert_code(&plain, 0);
    let v: Value = serde_json::from_str(&stdout_str(&plain)).unwrap();
    assert!(v["ppl_test"].as_f64().unwrap().is_finite());
    assert!(v["rollout_kl"].is_null(), "no teacher, no probe");

    let probed = run(&[
        "--seed",
        "4",
        "eval",
        "--params",
        params.to_str().unwrap(),
        "--data",
        data.join("valid.corpus").to_str().unwrap(),
        "--teacher-kind",
        "oracle",
        "--teacher-path",
        data.join("chain.json").to_str().unwrap(),
        "--eval-prompts",
        "4",
        "--max-new-tokens",
        "6",
    ]);
    assert_code(&probed, 0);
    let v: Value = serde_json::from_str(&stdout_str(&probed)).unwrap();
    assert!(v["ppl_valid"].as_f64().unwrap().is_finite());
    assert!(v["rollout_kl"].as_f64().unwrap().is_finite());

    let mislinked = run(&[
        "eval",
        "--params",
        params.to_str().unwrap(),
        "--data",
        data.join("test.corpus").to_str().unwrap(),
        "--teacher-kind",
        "oracle",
    ]);
    assert_code(&mislinked, 2);
}

// ---------------------------------------------------------------------------
// compare

#[test]
fn compare_emits_csv_with_summary_rows() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert_code(&gen_tiny_data(&data, 9), 0);

    let out_dir = tmp.path().join("cmp");
    let cfg = tmp.path().join("cfg.json");
    write_config(&cfg, &tiny_config(&data, &out_dir, "dp-opd", 9));
    let out = run(&[
        "compare",
        "--config",
        cfg.to_str().unwrap(),
        "--seeds",
        "1,2,3",
    ]);
    assert_code(&out, 0);

    let csv = fs::read_to_string(out_dir.join("compare.csv")).unwrap();
    assert_eq!(csv, stdout_str(&out), "file and stdout agree");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines.len(),
        13,
        "header + 9 seed rows + 3 summaries:\n{csv}"
    );
    assert_eq!(lines[0], "method,seed,ppl_test,rollout_kl");
    for method in ["dp-opd", "offpolicy-dpkd", "dpsgd-only"] {
        assert_eq!(
            lines
                .iter()
                .filter(|l| l.starts_with(&format!("{method},")))
                .count(),
            4
        );
        assert!(
            lines
                .iter()
                .any(|l| l.starts_with(&format!("{method},mean±stddev,"))),
            "summary row for {method}"
        );
        for seed in ["1", "2", "3"] {
            let prefix = format!("{method},{seed},");
            let row = lines
                .iter()
                .find(|l| l.starts_with(&prefix))
                .expect("seed row");
            let fields: Vec<&str> = row.split(',').collect();
            assert_eq!(fields.len(), 4);
            assert!(fields[2].parse::<f64>().unwrap().is_finite());
            assert!(fields[3].parse::<f64>().unwrap().is_finite());
        }
    }

    // Per-method run directories with full artifacts.
    for method in ["dp-opd", "offpolicy-dpkd", "dpsgd-only"] {
        assert!(out_dir
            .join(format!("{method}-s1"))
            .join("manifest.json")
            .exists());
    }

    // The whole comparison is deterministic.
    let out_dir2 = tmp.path().join("cmp2");
    let cfg2 = tmp.path().join("cfg2.json");
    write_config(&cfg2, &tiny_config(&data, &out_dir2, "dp-opd", 9));
    assert_code(
        &run(&[
            "compare",
            "--config",
            cfg2.to_str().unwrap(),
            "--seeds",
            "1,2,3",
        ]),
        0,
    );
    assert_eq!(
        csv,
        fs::read_to_string(out_dir2.join("compare.csv")).unwrap()
    );
}

#[test]
fn compare_requires_three_seeds() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert_code(&gen_tiny_data(&data, 9), 0);
    let cfg = tmp.path().join("cfg.json");
    write_config(
        &cfg,
        &tiny_config(&data, &tmp.path().join("cmp"), "dp-opd", 9),
    );
    let out = run(&[
        "compare",
        "--config",
        cfg.to_str().unwrap(),
        "--seeds",
        "1,2",
    ]);
    assert_code(&out, 2);
}

// ---------------------------------------------------------------------------
// account / calibrate

#[test]
fn account_reports_epsilon_with_default_delta() {
    let by_n = run(&[
        "account", "--q", "0.01", "--sigma", "1.5", "--steps", "100", "--n", "2000",
    ]);
    assert_code(&by_n, 0);
    let v: Value = serde_json::from_str(&stdout_str(&by_n)).unwrap();
    assert_eq!(v["delta"].as_f64().unwrap(), 1.0 / 2000.0);
    assert_eq!(v["q"].as_f64().unwrap(), 0.01);
    assert_eq!(v["steps"].as_u64().unwrap(), 100);
    let eps = v["epsilon"].as_f64().unwrap();
    assert!(eps > 0.0 && eps.is_finite());
    assert!(v["best_alpha"].as_u64().unwrap() >= 2);

    let by_delta = run(&[
        "account", "--q", "0.01", "--sigma", "1.5", "--steps", "100", "--delta", "0.0005",
    ]);
    assert_code(&by_delta, 0);
    let w: Value = serde_json::from_str(&stdout_str(&by_delta)).unwrap();
    assert_eq!(w["epsilon"], v["epsilon"]);

    // Exactly one of --delta and --n.
    assert_code(
        &run(&["account", "--q", "0.01", "--sigma", "1.5", "--steps", "100"]),
        2,
    );
    assert_code(
        &run(&[
            "account", "--q", "0.01", "--sigma", "1.5", "--steps", "100", "--delta", "0.0005",
            "--n", "2000",
        ]),
        2,
    );
}

#[test]
fn calibrate_round_trips_through_account() {
    let cal = run(&[
        "calibrate",
        "--q",
        "0.01",
        "--steps",
        "2000",
        "--epsilon",
        "2.0",
        "--n",
        "2000",
    ]);
    assert_code(&cal, 0);
    let v: Value = serde_json::from_str(&stdout_str(&cal)).unwrap();
    let sigma = v["sigma"].as_f64().unwrap();
    assert!(sigma > 0.0);
    assert!(v["epsilon"].as_f64().unwrap() <= 2.0);
    assert_eq!(v["hit_lower_bound"], false);

    let acct = run(&[
        "account",
        "--q",
        "0.01",
        "--sigma",
        &sigma.to_string(),
        "--steps",
        "2000",
        "--n",
        "2000",
    ]);
    let w: Value = serde_json::from_str(&stdout_str(&acct)).unwrap();
    let eps = w["epsilon"].as_f64().unwrap();
    assert!((1.98..=2.0).contains(&eps), "round trip epsilon {eps}");
}

// ---------------------------------------------------------------------------
// sweep-beta

#[test]
fn sweep_beta_writes_one_row_per_beta() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert_code(&gen_tiny_data(&data, 2), 0);

    let out_dir = tmp.path().join("sweep");
    let cfg = tmp.path().join("cfg.json");
    write_config(&cfg, &tiny_config(&data, &out_dir, "dp-opd", 2));
    let out = run(&[
        "sweep-beta",
        "--config",
        cfg.to_str().unwrap(),
        "--betas",
        "0.0,1.0",
    ]);
    assert_code(&out, 0);

    let csv = fs::read_to_string(out_dir.join("beta_sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "beta,ppl_test");
    assert_eq!(lines.len(), 3);
    for (line, beta) in lines[1..].iter().zip(["0", "1"]) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[0], beta);
        assert!(fields[1].parse::<f64>().unwrap().is_finite());
    }
}

// ---------------------------------------------------------------------------
// exit codes

#[test]
fn usage_and_runtime_errors_use_distinct_codes() {
    // No config where one is required.
    assert_code(&run(&["train"]), 2);
    // Config file that does not exist: runtime (I/O) failure.
    assert_code(&run(&["train", "--config", "/nonexistent/cfg.json"]), 3);
    // Unknown subcommand is clap's usage error.
    assert_code(&run(&["frobnicate"]), 2);

    // Config that parses but violates shape rules.
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{ "version": 99 }"#).unwrap();
    assert_code(&run(&["train", "--config", bad.to_str().unwrap()]), 2);
}
