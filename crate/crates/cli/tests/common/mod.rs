#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn fixture(name: &str) -> String {
    manifest_dir()
        .join("tests/fixtures")
        .join(name)
        .display()
        .to_string()
}

pub fn config(name: &str) -> String {
    manifest_dir()
        .join("../core/configs")
        .join(name)
        .display()
        .to_string()
}

pub fn av_args() -> Vec<String> {
    vec![
        "--template".into(),
        config("av_template.json"),
        "--graph".into(),
        config("av_graph.json"),
    ]
}

pub fn pair_args(template: &str, graph: &str) -> Vec<String> {
    vec![
        "--template".into(),
        fixture(template),
        "--graph".into(),
        fixture(graph),
    ]
}

pub fn cotpack<S: AsRef<str>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cotpack"))
        .args(args.iter().map(AsRef::as_ref))
        .output()
        .expect("binary runs")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// Compares against `tests/golden/<name>`; `UPDATE_GOLDEN=1` rewrites it.
pub fn golden(name: &str, actual: &[u8]) -> Result<(), String> {
    let path = manifest_dir().join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(&path, actual).map_err(|e| e.to_string())?;
        return Ok(());
    }
    let expected = fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        Ok(())
    } else {
        Err(format!(
            "{} differs from output:\n{}",
            path.display(),
            String::from_utf8_lossy(actual)
        ))
    }
}

pub fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn expect_code(out: &Output, want: i32) -> Result<(), String> {
    if code(out) == want {
        Ok(())
    } else {
        Err(format!(
            "exit {} (wanted {want}); stderr: {}",
            code(out),
            stderr(out)
        ))
    }
}

fn args(parts: &[&str], tail: Vec<String>) -> Vec<String> {
    parts.iter().map(|s| s.to_string()).chain(tail).collect()
}

fn with(mut base: Vec<String>, extra: &[&str]) -> Vec<String> {
    base.extend(extra.iter().map(|s| s.to_string()));
    base
}

/// Runs `argv`, requires exit 0, and compares stdout with a golden file.
fn stdout_golden(name: &str, argv: Vec<String>) -> Result<(), String> {
    let out = cotpack(&argv);
    expect_code(&out, 0)?;
    golden(name, &out.stdout)
}

/// Runs `argv` plus `flag <tmp>`, requires exit 0, and compares the file.
fn file_golden(name: &str, argv: Vec<String>, flag: &str) -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join(name);
    let out = cotpack(&with(argv, &[flag, &path.display().to_string()]));
    expect_code(&out, 0)?;
    golden(name, &read(&path))
}

/// Byte-exact output checks on the shipped and fixture configs.
pub fn golden_checks() -> Vec<(&'static str, Result<(), String>)> {
    let mock = ["--model", "mock", "--seed", "7", "--no-timing"];
    vec![
        (
            "validate driving configs",
            stdout_golden("validate_av.txt", args(&["validate"], av_args())),
        ),
        (
            "plan driving configs",
            stdout_golden("plan_av.txt", args(&["plan"], av_args())),
        ),
        (
            "plan driving typical lengths",
            stdout_golden(
                "plan_av_typical.txt",
                with(
                    args(&["plan"], av_args()),
                    &[
                        "--lengths-file",
                        &config("av_lengths.json"),
                        "--monte-carlo",
                        "100",
                        "--seed",
                        "1",
                    ],
                ),
            ),
        ),
        (
            "plan chain",
            stdout_golden(
                "plan_chain.txt",
                with(
                    args(
                        &["plan"],
                        pair_args("chain_template.json", "chain_graph.json"),
                    ),
                    &["--lengths", "3,4,5"],
                ),
            ),
        ),
        (
            "plan edgeless",
            stdout_golden(
                "plan_free.txt",
                with(
                    args(
                        &["plan"],
                        pair_args("free_template.json", "free_graph.json"),
                    ),
                    &["--lengths", "5,5,5,5"],
                ),
            ),
        ),
        (
            "plan trace",
            file_golden(
                "plan_av_trace.jsonl",
                with(
                    args(&["plan"], av_args()),
                    &["--lengths-file", &config("av_lengths.json")],
                ),
                "--trace",
            ),
        ),
        (
            "decode mock text",
            stdout_golden(
                "decode_av_mock.txt",
                with(args(&["decode"], av_args()), &mock),
            ),
        ),
        (
            "decode mock json",
            file_golden(
                "decode_av_mock.json",
                with(args(&["decode"], av_args()), &mock),
                "--out",
            ),
        ),
        (
            "decode reference json",
            file_golden(
                "decode_av_reference.json",
                with(
                    args(&["decode"], av_args()),
                    &["--seed", "0", "--no-timing"],
                ),
                "--out",
            ),
        ),
        (
            "bench chain csv",
            file_golden(
                "bench_chain.csv",
                with(
                    args(
                        &["bench"],
                        pair_args("chain_template.json", "chain_graph.json"),
                    ),
                    &[
                        "--model",
                        "mock",
                        "--prompts",
                        "3",
                        "--warmup",
                        "0",
                        "--no-timing",
                        "--summary",
                        "/dev/null",
                    ],
                ),
                "--out",
            ),
        ),
        (
            "bench driving summary",
            file_golden(
                "bench_av_summary.json",
                with(
                    args(&["bench"], av_args()),
                    &[
                        "--model",
                        "mock",
                        "--prompts",
                        "5",
                        "--warmup",
                        "1",
                        "--no-timing",
                        "--out",
                        "/dev/null",
                    ],
                ),
                "--summary",
            ),
        ),
    ]
}

fn contains(out: &Output, needle: &str) -> Result<(), String> {
    if stderr(out).contains(needle) {
        Ok(())
    } else {
        Err(format!("stderr lacks `{needle}`: {}", stderr(out)))
    }
}

/// Exit-code contract: 0 success, 1 runtime failure, 2 configuration failure.
pub fn exit_code_checks() -> Vec<(&'static str, Result<(), String>)> {
    let run = |argv: Vec<String>, want: i32| {
        let out = cotpack(&argv);
        expect_code(&out, want).map(|_| out)
    };
    let missing = manifest_dir()
        .join("tests/fixtures/absent.bin")
        .display()
        .to_string();
    vec![
        (
            "validate ok",
            run(args(&["validate"], av_args()), 0).map(drop),
        ),
        (
            "unknown field",
            run(
                args(
                    &["validate"],
                    pair_args(
                        "../../../core/configs/av_template.json",
                        "unknown_field_graph.json",
                    ),
                ),
                2,
            )
            .and_then(|o| contains(&o, "`wheather`")),
        ),
        (
            "cycle",
            run(
                args(
                    &["validate"],
                    pair_args("chain_template.json", "cyclic_graph.json"),
                ),
                2,
            )
            .and_then(|o| contains(&o, "f0 -> f1 -> f2 -> f0")),
        ),
        (
            "zero capacity and unreadable graph both reported",
            run(
                args(
                    &["validate"],
                    pair_args("zero_capacity_template.json", "absent.json"),
                ),
                2,
            )
            .and_then(|o| contains(&o, "max_len").and(contains(&o, "absent.json"))),
        ),
        (
            "bad lengths",
            run(
                with(
                    args(
                        &["plan"],
                        pair_args("chain_template.json", "chain_graph.json"),
                    ),
                    &["--lengths", "3,x,5"],
                ),
                2,
            )
            .map(drop),
        ),
        (
            "length count",
            run(
                with(
                    args(
                        &["plan"],
                        pair_args("chain_template.json", "chain_graph.json"),
                    ),
                    &["--lengths", "3,4"],
                ),
                2,
            )
            .map(drop),
        ),
        (
            "missing weights",
            run(
                with(args(&["decode"], av_args()), &["--weights", &missing]),
                2,
            )
            .map(drop),
        ),
        (
            "weights on the mock",
            run(
                with(
                    args(&["decode"], av_args()),
                    &["--model", "mock", "--weights", &missing],
                ),
                2,
            )
            .map(drop),
        ),
        (
            "prompt too long is a runtime failure",
            run(
                with(
                    args(
                        &["decode"],
                        pair_args("chain_template.json", "chain_graph.json"),
                    ),
                    &["--prompt", "much too long"],
                ),
                1,
            )
            .and_then(|o| contains(&o, "prompt")),
        ),
        (
            "zero prompts",
            run(with(args(&["bench"], av_args()), &["--prompts", "0"]), 2).map(drop),
        ),
        (
            "usage error",
            run(args(&["decode", "--mode", "sideways"], av_args()), 2).map(drop),
        ),
    ]
}
