//! The `kgce` binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kgce_testkit::fixtures_dir;
use tempfile::TempDir;

fn kgce(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgce")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn synth_reproduces_the_fixture_tasks() {
    let tmp = TempDir::new().unwrap();
    let fx = fixtures_dir();
    let o = kgce(&[
        "synth",
        "--templates",
        path(&fx.join("templates")),
        "--bindings",
        path(&fx.join("bindings.json")),
        "--out",
        path(tmp.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut n = 0;
    for entry in fs::read_dir(fx.join("tasks")).unwrap() {
        let entry = entry.unwrap();
        let generated = fs::read_to_string(tmp.path().join(entry.file_name())).unwrap();
        assert_eq!(generated, fs::read_to_string(entry.path()).unwrap(), "{:?}", entry.file_name());
        n += 1;
    }
    assert_eq!(n, 6);
}

#[test]
fn eval_of_golden_trace_is_the_golden_report() {
    let fx = fixtures_dir();
    let o = kgce(&[
        "eval",
        "--trace",
        path(&fx.join("golden/xiaoya_bd_homework.jsonl")),
        "--task",
        path(&fx.join("tasks/xiaoya_bd_homework.json")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), fs::read_to_string(fx.join("golden/xiaoya_bd_homework.json")).unwrap());
}

#[test]
fn eval_rejects_a_trace_for_another_task() {
    let fx = fixtures_dir();
    let o = kgce(&[
        "eval",
        "--trace",
        path(&fx.join("golden/xiaoya_bd_homework.jsonl")),
        "--task",
        path(&fx.join("tasks/xiazi_exam.json")),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("xiazi_exam"));
}

#[test]
fn report_on_table_two_fixture() {
    let fx = fixtures_dir();
    let o = kgce(&[
        "report",
        "--runs",
        path(&fx.join("reference/pooled/without_kb")),
        path(&fx.join("reference/pooled/with_kb")),
        "--format",
        "csv",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip_while(|l| *l != "# improvement").skip(2).collect();
    let shown: Vec<f64> = rows.iter().map(|r| r.rsplit(',').next().unwrap().parse().unwrap()).collect();
    let published = [25.39, 56.37, 33.06, 18.66, 32.39, -20.27, -43.81, -32.51];
    for (s, p) in shown.iter().zip(published) {
        assert!((s - p).abs() <= 0.02, "{s} vs {p}");
    }
}

#[test]
fn report_rejects_unknown_format() {
    let fx = fixtures_dir();
    let o = kgce(&["report", "--runs", path(&fx.join("reference/pooled/with_kb")), "--format", "xlsx"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unsupported report format"));
}

#[test]
fn run_via_flags_then_correlate() {
    let tmp = TempDir::new().unwrap();
    let fx = fixtures_dir();
    let out = tmp.path().join("run");
    let o = kgce(&[
        "run",
        "--tasks",
        path(&fx.join("tasks")),
        "--world",
        path(&fx.join("world.json")),
        "--kb",
        path(&fx.join("kb.json")),
        "--kb-enabled",
        "--model-url",
        &format!("mock:{}", path(&fx.join("mock_plans.json"))),
        "--parallelism",
        "3",
        "--output",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("with_kb: 6 episode(s)"));

    let o = kgce(&["correlate", "--runs", path(&out), "--metrics", "CR,F1,BR"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("# correlation (episodes: 6)\nmetric,CR,F1,BR\nCR,1,"));
}

#[test]
fn correlate_needs_two_episodes() {
    let tmp = TempDir::new().unwrap();
    let metrics = tmp.path().join("metrics");
    fs::create_dir_all(&metrics).unwrap();
    fs::copy(
        fixtures_dir().join("golden/xiaoya_bd_homework.json"),
        metrics.join("xiaoya_bd_homework.json"),
    )
    .unwrap();
    let o = kgce(&["correlate", "--runs", path(tmp.path())]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("at least 2 episodes"), "{}", stderr(&o));
}

#[test]
fn run_fails_fast_on_missing_world() {
    let tmp = TempDir::new().unwrap();
    let fx = fixtures_dir();
    let o = kgce(&[
        "run",
        "--config",
        path(&fx.join("runs/scripted.json")),
        "--world",
        path(&tmp.path().join("missing.json")),
        "--output",
        path(&tmp.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!tmp.path().join("out").exists());
}
