//! End-to-end checks of the eqplan binary: exit codes, output files, and
//! the rerun-gives-identical-bytes contract (wall-time fields masked).

mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

use common::masked_file;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_eqplan"));
    // a leaked EQPLAN_* variable must not steer these tests
    cmd.env_clear();
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_small_planner(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("planner.json");
    fs::write(&path, r#"{"budget": 48, "sim_workers": 2, "seed": 3}"#).unwrap();
    path
}

#[test]
fn gen_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    for out in [&out_a, &out_b] {
        let output = run(bin()
            .args(["gen", "--domain", "math", "--count", "4", "--depth", "5", "--seed", "9"])
            .arg("--out")
            .arg(out));
        assert!(output.status.success(), "{}", stderr(&output));
        let text = stdout(&output);
        assert!(text.contains("MATH-5-0"));
        assert!(text.contains("MATH-5-3"));
    }
    let a = fs::read(out_a.join("suite-MATH-5.json")).unwrap();
    let b = fs::read(out_b.join("suite-MATH-5.json")).unwrap();
    assert_eq!(a, b, "same args and seed must yield identical manifests");
}

#[test]
fn run_expr_reaches_the_known_best_on_both_engines() {
    let tmp = TempDir::new().unwrap();
    let planner = write_small_planner(tmp.path());

    for engine in ["mcts", "baseline"] {
        let output = run(bin()
            .args(["run", "--expr", "(/ (* a 2) 2)", "--engine", engine])
            .args(["--max-episode-len", "8"])
            .arg("--planner")
            .arg(&planner)
            .arg("--out")
            .arg(tmp.path().join(engine)));
        assert!(output.status.success(), "{engine}: {}", stderr(&output));
        let text = stdout(&output);
        assert!(text.contains("expression:  a"), "{engine} printed:\n{text}");
        assert!(text.contains("final cost:  1"), "{engine} printed:\n{text}");
    }
    // the planned engine leaves its evidence behind
    let mcts_dir = tmp.path().join("mcts");
    assert!(mcts_dir.join("run-expr-mcts.json").exists());
    assert!(mcts_dir.join("trace-expr.jsonl").exists());
    assert!(mcts_dir.join("episode-expr.jsonl").exists());
    let episode = fs::read_to_string(mcts_dir.join("episode-expr.jsonl")).unwrap();
    assert!(episode.lines().count() >= 1);
}

#[test]
fn missing_rules_file_fails_fast() {
    let tmp = TempDir::new().unwrap();
    let output = run(bin()
        .args(["run", "--expr", "(+ a 0)", "--rules", "/definitely/not/here.rules"])
        .arg("--out")
        .arg(tmp.path()));
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr(&output).contains("not/here.rules"));
    assert!(fs::read_dir(tmp.path()).unwrap().next().is_none(), "no output before validation");
}

#[test]
fn zero_count_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let output = run(bin().args(["gen", "--count", "0"]).arg("--out").arg(tmp.path()));
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr(&output).contains("--count"));
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run(bin().arg("--help")).status.code(), Some(0));
    assert_eq!(run(bin().arg("--version")).status.code(), Some(0));
    assert_eq!(run(bin().arg("frobnicate")).status.code(), Some(1));
}

#[test]
fn bench_writes_reports_and_reruns_identically() {
    let tmp = TempDir::new().unwrap();
    let planner = write_small_planner(tmp.path());
    let gen_out = tmp.path().join("suite");
    let output = run(bin()
        .args(["gen", "--domain", "math", "--count", "2", "--depth", "4", "--seed", "2"])
        .arg("--out")
        .arg(&gen_out));
    assert!(output.status.success(), "{}", stderr(&output));
    let manifest = gen_out.join("suite-MATH-4.json");
    let manifest_before = fs::read(&manifest).unwrap();

    let bench = |out: &Path| {
        run(bin()
            .arg("bench")
            .arg("--manifest")
            .arg(&manifest)
            .args(["--engines", "baseline,mcts"])
            .args(["--node-limit", "2000", "--max-episode-len", "4"])
            .arg("--planner")
            .arg(&planner)
            .arg("--out")
            .arg(out))
    };
    let first_out = tmp.path().join("first");
    let first = bench(&first_out);
    assert!(first.status.success(), "{}", stderr(&first));
    let table = stdout(&first);
    assert!(table.contains("baseline") && table.contains("mcts"));
    assert!(table.contains("MATH-4-0") && table.contains("MATH-4-1"));

    for file in [
        "records.jsonl",
        "heatmap-baseline.csv",
        "heatmap-mcts.csv",
        "heatmap-baseline-totals.json",
        "heatmap-mcts-totals.json",
        "timing.txt",
        "timing.json",
    ] {
        assert!(first_out.join(file).exists(), "bench must write {file}");
    }
    let records = fs::read_to_string(first_out.join("records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 4, "2 cases x 2 engines");
    assert_eq!(manifest_before, fs::read(&manifest).unwrap(), "input stays untouched");

    let second_out = tmp.path().join("second");
    let second = bench(&second_out);
    assert!(second.status.success(), "{}", stderr(&second));
    for file in ["records.jsonl", "heatmap-baseline-totals.json"] {
        assert_eq!(
            masked_file(&first_out.join(file)),
            masked_file(&second_out.join(file)),
            "{file} must be identical across reruns once times are masked"
        );
    }
    for file in ["heatmap-baseline.csv", "heatmap-mcts.csv"] {
        assert_eq!(
            fs::read(first_out.join(file)).unwrap(),
            fs::read(second_out.join(file)).unwrap(),
            "{file} carries no time fields at all"
        );
    }

    // the standalone heatmap command rebuilds the same csv from records
    let rebuilt_out = tmp.path().join("rebuilt");
    let rebuilt = run(bin()
        .arg("heatmap")
        .arg("--records")
        .arg(first_out.join("records.jsonl"))
        .arg("--out")
        .arg(&rebuilt_out));
    assert!(rebuilt.status.success(), "{}", stderr(&rebuilt));
    assert_eq!(
        fs::read(first_out.join("heatmap-mcts.csv")).unwrap(),
        fs::read(rebuilt_out.join("heatmap-mcts.csv")).unwrap()
    );
}

#[test]
fn config_file_env_and_flags_layer_in_order() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("config.json");
    fs::write(&config, r#"{"domain": "prop", "seed": 11}"#).unwrap();

    // file value applies when nothing overrides it
    let from_file = run(bin()
        .args(["gen", "--count", "1", "--depth", "3"])
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(tmp.path().join("file")));
    assert!(from_file.status.success(), "{}", stderr(&from_file));
    assert!(tmp.path().join("file/suite-PROP-3.json").exists());

    // env beats file
    let from_env = run(bin()
        .args(["gen", "--count", "1", "--depth", "3"])
        .env("EQPLAN_DOMAIN", "math")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(tmp.path().join("env")));
    assert!(from_env.status.success(), "{}", stderr(&from_env));
    assert!(tmp.path().join("env/suite-MATH-3.json").exists());

    // flag beats both
    let from_flag = run(bin()
        .args(["gen", "--count", "1", "--depth", "3", "--domain", "prop"])
        .env("EQPLAN_DOMAIN", "math")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(tmp.path().join("flag")));
    assert!(from_flag.status.success(), "{}", stderr(&from_flag));
    assert!(tmp.path().join("flag/suite-PROP-3.json").exists());

    // unknown config keys are rejected, not ignored
    fs::write(&config, r#"{"node_limt": 50}"#).unwrap();
    let bad = run(bin()
        .args(["gen", "--count", "1"])
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(tmp.path().join("bad")));
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("node_limt"));
}
