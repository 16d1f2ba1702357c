//! End-to-end tests of the `specdec` binary: process spawns, exit codes,
//! and the JSON contract of each subcommand.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn specdec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specdec"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_str(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf8 stdout")
}

fn stderr_str(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("utf8 stderr")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// Generates a small model file for decode tests and returns its path.
fn small_model(dir: &Path, seed: u64) -> PathBuf {
    let path = dir.join(format!("model-{seed}.bin"));
    let out = specdec(&[
        "gen-model",
        "--out",
        path.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
        "--vocab",
        "32",
        "--dim",
        "16",
        "--layers",
        "2",
        "--heads",
        "2",
        "--head-dim",
        "8",
        "--ffn",
        "32",
        "--window",
        "16",
        "--gamma",
        "2",
        "--beam-widths",
        "2,2",
    ]);
    assert_eq!(exit_code(&out), 0, "gen-model failed: {}", stderr_str(&out));
    path
}

fn parse_report(out: &Output) -> Value {
    serde_json::from_str(&stdout_str(out)).expect("run prints a JSON report")
}

#[test]
fn gen_model_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_model(dir.path(), 7);
    let b_path = dir.path().join("again.bin");
    let out = specdec(&[
        "gen-model", "--out", b_path.to_str().unwrap(), "--seed", "7",
        "--vocab", "32", "--dim", "16", "--layers", "2", "--heads", "2",
        "--head-dim", "8", "--ffn", "32", "--window", "16",
        "--gamma", "2", "--beam-widths", "2,2",
    ]);
    assert_eq!(exit_code(&out), 0);
    let bytes_a = std::fs::read(&a).unwrap();
    let bytes_b = std::fs::read(&b_path).unwrap();
    assert_eq!(bytes_a, bytes_b, "same args must produce identical files");

    let c = small_model(dir.path(), 8);
    assert_ne!(bytes_a, std::fs::read(c).unwrap(), "a different seed must change the file");
}

#[test]
fn corrupt_header_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(dir.path(), 1);
    let mut bytes = std::fs::read(&model).unwrap();
    // Flip bytes inside the JSON header (it starts after the 8-byte length).
    for b in bytes.iter_mut().skip(10).take(4) {
        *b = b'#';
    }
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, bytes).unwrap();

    let out = specdec(&[
        "run", "--model", bad.to_str().unwrap(), "--mode", "vanilla",
        "--prompt-len", "4", "--gen-len", "2",
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(
        stderr_str(&out).contains("malformed model file"),
        "stderr: {}",
        stderr_str(&out)
    );
}

#[test]
fn missing_model_is_a_runtime_error() {
    let out = specdec(&["run", "--model", "/nonexistent/model.bin", "--mode", "vanilla"]);
    assert_eq!(exit_code(&out), 1);
}

#[test]
fn vanilla_reports_tau_one() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(dir.path(), 2);
    let out = specdec(&[
        "run", "--model", model.to_str().unwrap(), "--mode", "vanilla",
        "--prompt-len", "8", "--gen-len", "16", "--seed", "3",
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_str(&out));
    let report = parse_report(&out);
    assert_eq!(report["tau"], 1.0);
    assert_eq!(report["tokens"].as_array().unwrap().len(), 16);
    assert_eq!(report["accept_histogram"].as_array().unwrap().len(), 0);
}

#[test]
fn chain_oracle_reaches_gamma_plus_one() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(dir.path(), 2);
    // gen-len divisible by gamma+1 so truncation cannot shave the ratio.
    let out = specdec(&[
        "run", "--model", model.to_str().unwrap(), "--mode", "chain",
        "--draft", "oracle", "--gamma", "4", "--prompt-len", "8",
        "--gen-len", "50", "--seed", "3",
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_str(&out));
    let report = parse_report(&out);
    assert_eq!(report["tau"], 5.0);
    assert_eq!(report["target_forwards"], 10);
}

#[test]
fn tree_matches_vanilla_at_temperature_zero() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(dir.path(), 4);
    let common = ["--prompt-len", "12", "--gen-len", "32", "--seed", "9"];
    let vanilla = specdec(
        &[&["run", "--model", model.to_str().unwrap(), "--mode", "vanilla"], &common[..]].concat(),
    );
    let tree = specdec(
        &[&["run", "--model", model.to_str().unwrap(), "--mode", "tree"], &common[..]].concat(),
    );
    assert_eq!(exit_code(&vanilla), 0, "stderr: {}", stderr_str(&vanilla));
    assert_eq!(exit_code(&tree), 0, "stderr: {}", stderr_str(&tree));
    let v = parse_report(&vanilla);
    let t = parse_report(&tree);
    assert_eq!(v["tokens"], t["tokens"], "greedy tree decode must be lossless");
    assert!(t["tau"].as_f64().unwrap() > 1.0, "tree decode should accept speculated tokens");
}

/// The metrics JSON is byte-deterministic apart from wall-clock fields.
fn strip_timing(json: &str) -> String {
    json.lines()
        .filter(|l| !l.contains("wall_seconds") && !l.contains("tokens_per_sec"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn metrics_json_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(dir.path(), 5);
    let out_path = dir.path().join("metrics.json");
    let args = [
        "run", "--model", model.to_str().unwrap(), "--mode", "tree",
        "--temperature", "0.7", "--prompt-len", "16", "--gen-len", "24",
        "--seed", "11", "--out", out_path.to_str().unwrap(),
    ];
    let first = specdec(&args);
    assert_eq!(exit_code(&first), 0, "stderr: {}", stderr_str(&first));
    let file_first = std::fs::read_to_string(&out_path).unwrap();
    assert_eq!(stdout_str(&first), file_first, "--out must mirror stdout");

    let second = specdec(&args);
    assert_eq!(exit_code(&second), 0);
    assert_eq!(
        strip_timing(&stdout_str(&first)),
        strip_timing(&stdout_str(&second)),
        "identical flags and seed must reproduce the report"
    );
}

#[test]
fn dump_tree_writes_one_json_line_per_round() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(dir.path(), 6);
    let dump = dir.path().join("trees.jsonl");
    let out = specdec(&[
        "run", "--model", model.to_str().unwrap(), "--mode", "tree",
        "--prompt-len", "8", "--gen-len", "12", "--seed", "2",
        "--dump-tree", dump.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_str(&out));
    let report = parse_report(&out);
    let rounds = report["target_forwards"].as_u64().unwrap() as usize;
    let lines: Vec<String> = std::fs::read_to_string(&dump)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    assert_eq!(lines.len(), rounds, "one dump line per verification round");
    for line in &lines {
        let v: Value = serde_json::from_str(line).expect("each dump line is JSON");
        for key in ["round", "tree", "accepted_ids", "accepted_tokens", "bonus_token"] {
            assert!(v.get(key).is_some(), "dump line missing '{key}': {line}");
        }
    }
}

#[test]
fn config_errors_name_the_flag_and_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(dir.path(), 3);
    let model = model.to_str().unwrap();

    let cases: Vec<(Vec<&str>, &str)> = vec![
        (vec!["--temperature=-1"], "temperature"),
        (vec!["--gen-len", "0"], "gen-len"),
        (vec!["--prompt-len", "0"], "prompt-len"),
        (vec!["--draft", "noisy:1.5"], "noisy"),
        (vec!["--draft", "wat"], "draft"),
        (vec!["--cross-layer", "99"], "cross-layer"),
        (vec!["--mode", "chain", "--beam-widths", "2,2"], "beam-widths"),
        (vec!["--mode", "tree", "--gamma", "3"], "beam-widths"),
    ];
    for (extra, needle) in cases {
        let mut args = vec!["run", "--model", model, "--prompt-len", "4", "--gen-len", "2"];
        if !extra.contains(&"--mode") {
            args.extend(["--mode", "chain"]);
        }
        args.extend(extra.iter().copied());
        let out = specdec(&args);
        assert_eq!(exit_code(&out), 2, "args {args:?} should be a config error");
        assert!(
            stderr_str(&out).contains(needle),
            "stderr for {args:?} should name '{needle}': {}",
            stderr_str(&out)
        );
    }
}

#[test]
fn selftest_suite_filter_passes_and_prints_counts() {
    let out = specdec(&["selftest", "--level", "fast", "--suite", "softmax lse algebra"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_str(&out));
    let text = stdout_str(&out);
    assert!(text.contains("softmax lse algebra"), "stdout: {text}");
    assert!(text.contains("ok"), "stdout: {text}");
    assert!(text.contains("checks"), "stdout: {text}");

    let unknown = specdec(&["selftest", "--suite", "no such suite"]);
    assert_eq!(exit_code(&unknown), 2);
}

#[test]
fn sabotaged_selftest_names_the_merge_suite() {
    let out = specdec(&[
        "selftest", "--level", "fast", "--suite", "merge exactness",
        "--sabotage", "merge",
    ]);
    assert_eq!(exit_code(&out), 1, "sabotage must fail the run");
    let text = format!("{}{}", stdout_str(&out), stderr_str(&out));
    assert!(text.contains("merge exactness"), "output must name the violated invariant: {text}");
    assert!(text.contains("FAILED"), "output: {text}");
}
