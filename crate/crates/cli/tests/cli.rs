use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn rstbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rstbench"))
        .args(args)
        .current_dir(repo_root())
        .env("RUST_BACKTRACE", "0")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rstbench(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_compare_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    for (method, seed) in [("baseline", "0"), ("baseline", "1"), ("lion", "0")] {
        let out = ok(&[
            "train",
            "--method",
            method,
            "--seed",
            seed,
            "--budget",
            "0.4",
            "--out-dir",
            s(&runs),
        ]);
        assert!(out.contains("steps"), "{out}");
    }
    let dir = runs.join("baseline_0.4_0");
    for f in [
        "config.toml",
        "metrics.jsonl",
        "summary.json",
        "ledger.jsonl",
        "checkpoint.bin",
        "plot.csv",
    ] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }

    let again = rstbench(&[
        "train",
        "--method",
        "baseline",
        "--budget",
        "0.4",
        "--out-dir",
        s(&runs),
    ]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&[
        "train",
        "--method",
        "baseline",
        "--budget",
        "0.4",
        "--out-dir",
        s(&runs),
        "--force",
    ]);

    let stem = tmp.path().join("report");
    let table = ok(&[
        "compare",
        s(&dir),
        s(&runs.join("baseline_0.4_1")),
        s(&runs.join("lion_0.4_0")),
        "--out",
        s(&stem),
    ]);
    assert!(table.contains("baseline") && table.contains("lion"), "{table}");
    assert_eq!(std::fs::read_to_string(stem.with_extension("txt")).unwrap(), table);
    assert_eq!(
        std::fs::read_to_string(stem.with_extension("csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    let plot = tmp.path().join("p.csv");
    ok(&["plot-data", s(&dir), "--out", s(&plot)]);
    assert_eq!(
        std::fs::read(&plot).unwrap(),
        std::fs::read(dir.join("plot.csv")).unwrap()
    );
}

#[test]
fn config_file_and_bad_input() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&[
        "train",
        "--config",
        "configs/dropping.toml",
        "--budget",
        "0.3",
        "--out-dir",
        s(tmp.path()),
    ]);
    assert!(tmp.path().join("dropping_0.3_0").is_dir());
    assert!(!rstbench(&["train", "--method", "nope"]).status.success());
    assert!(
        !rstbench(&["train", "--config", "configs/lion.toml", "--method", "lion"])
            .status
            .success()
    );
    let missing = rstbench(&["train", "--method", "baseline", "--profile", "does/not/exist.toml"]);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("rstbench calibrate"));
}
