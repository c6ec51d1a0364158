//! End-to-end runs over the fixture task set.

use std::fs;
use std::path::{Path, PathBuf};

use kgce_core::agent::ModelEndpointConfig;
use kgce_core::eval::TerminalCause;
use kgce_core::runner::{evaluate_trace, load_tasks, run_benchmark, AgentConfig, RunConfig, RunError};
use kgce_core::trace::Trace;
use kgce_testkit::fixtures_dir;
use tempfile::TempDir;

fn config(name: &str, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::load(&fixtures_dir().join(format!("runs/{name}.json"))).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

fn copy_tasks(ids: &[&str], dir: &Path) -> PathBuf {
    let tasks = dir.join("tasks");
    fs::create_dir_all(&tasks).unwrap();
    for id in ids {
        fs::copy(
            fixtures_dir().join(format!("tasks/{id}.json")),
            tasks.join(format!("{id}.json")),
        )
        .unwrap();
    }
    tasks
}

#[test]
fn scripted_three_task_run_writes_layout() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = config("scripted", &tmp.path().join("run"));
    cfg.tasks_dir = copy_tasks(&["xiaoya_bd_homework", "xiazi_exam", "tasks_buy_milk"], tmp.path());
    let summary = run_benchmark(cfg).unwrap();
    assert_eq!(summary.episodes.len(), 3);
    let run = tmp.path().join("run");
    assert_eq!(
        files(&run.join("traces")),
        ["tasks_buy_milk.jsonl", "xiaoya_bd_homework.jsonl", "xiazi_exam.jsonl"]
    );
    assert_eq!(files(&run.join("metrics")).len(), 3);
    assert!(run.join("aggregate.json").is_file());
    assert!(run.join("aggregate.csv").is_file());
    assert_eq!(summary.aggregate.cr, 1.0);
    assert_eq!(summary.aggregate.episodes, 3);
}

#[test]
fn golden_trace_is_reproduced_bytewise() {
    let tmp = TempDir::new().unwrap();
    run_benchmark(config("scripted", tmp.path())).unwrap();
    for (generated, golden) in [
        ("traces/xiaoya_bd_homework.jsonl", "golden/xiaoya_bd_homework.jsonl"),
        ("metrics/xiaoya_bd_homework.json", "golden/xiaoya_bd_homework.json"),
    ] {
        assert_eq!(
            fs::read_to_string(tmp.path().join(generated)).unwrap(),
            fs::read_to_string(fixtures_dir().join(golden)).unwrap(),
            "{generated}"
        );
    }
}

#[test]
fn knowledge_lifts_completion_for_the_mock_model() {
    let tmp = TempDir::new().unwrap();
    let without = run_benchmark(config("mock_without_kb", &tmp.path().join("a"))).unwrap();
    let with = run_benchmark(config("mock_with_kb", &tmp.path().join("b"))).unwrap();
    assert!(with.aggregate.cr > without.aggregate.cr);
    for (id, ep) in &with.episodes {
        let kb_used = !ep.trace.header.kb_packages.is_empty();
        assert_eq!(kb_used, id.starts_with("xiaoya") || id.starts_with("xiazi"), "{id}");
        assert!(without.episodes[id].trace.header.kb_packages.is_empty());
    }
    // The unparseable opening reply costs a step but the run goes on.
    let portal = &with.episodes["portal_notice_to_notes"];
    assert!(portal.trace.steps[0].action.is_none());
    assert!(portal.trace.steps[0].parse_error.is_some());
    assert_eq!(portal.metrics.cr, 1.0);
    // The budget-exhaustion fixture.
    let advisor = &with.episodes["tasks_call_advisor"];
    assert_eq!(advisor.trace.end.terminal, TerminalCause::MaxStepsReached);
    assert!(advisor.metrics.rms);
    assert_eq!(advisor.metrics.counts.oor_count, 3);
}

#[test]
fn parallelism_does_not_change_output() {
    let tmp = TempDir::new().unwrap();
    let mut serial = config("mock_with_kb", &tmp.path().join("p1"));
    serial.parallelism = 1;
    let mut wide = config("mock_with_kb", &tmp.path().join("p4"));
    wide.parallelism = 4;
    run_benchmark(serial).unwrap();
    run_benchmark(wide).unwrap();
    for sub in ["traces", "metrics"] {
        let a = tmp.path().join("p1").join(sub);
        let b = tmp.path().join("p4").join(sub);
        assert_eq!(files(&a), files(&b));
        for f in files(&a) {
            assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{sub}/{f}");
        }
    }
    assert_eq!(
        fs::read(tmp.path().join("p1/aggregate.json")).unwrap(),
        fs::read(tmp.path().join("p4/aggregate.json")).unwrap()
    );
}

#[test]
fn stored_traces_re_evaluate_to_stored_metrics() {
    let tmp = TempDir::new().unwrap();
    let cfg = config("mock_without_kb", tmp.path());
    let tasks = load_tasks(&cfg.tasks_dir).unwrap();
    run_benchmark(cfg.clone()).unwrap();
    for task in &tasks {
        let id = &task.spec().task_id;
        let text = fs::read(tmp.path().join(format!("traces/{id}.jsonl"))).unwrap();
        let trace = Trace::read_jsonl(text.as_slice()).unwrap();
        let m = evaluate_trace(&trace, task, cfg.cpa_definition).unwrap();
        assert_eq!(
            m.to_json(),
            fs::read_to_string(tmp.path().join(format!("metrics/{id}.json"))).unwrap()
        );
    }
}

#[test]
fn load_errors_abort_before_any_episode() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("never");

    let mut cfg = config("scripted", &out);
    let scripts = tmp.path().join("scripts");
    fs::create_dir_all(&scripts).unwrap();
    cfg.agent = AgentConfig::Scripted { scripts_dir: scripts };
    assert!(matches!(run_benchmark(cfg), Err(RunError::Io { .. })));

    let mut cfg = config("scripted", &out);
    let tasks = copy_tasks(&["tasks_buy_milk"], tmp.path());
    let path = tasks.join("tasks_buy_milk.json");
    let text = fs::read_to_string(&path).unwrap().replace("note_contains", "telepathy");
    fs::write(&path, text).unwrap();
    cfg.tasks_dir = tasks;
    assert!(run_benchmark(cfg).is_err());

    let mut cfg = config("mock_with_kb", &out);
    cfg.kb = None;
    assert!(matches!(run_benchmark(cfg), Err(RunError::Config(_))));

    let mut cfg = config("scripted", &out);
    cfg.parallelism = 0;
    assert!(matches!(run_benchmark(cfg), Err(RunError::Config(_))));

    assert!(!out.exists());
}

#[test]
fn transport_failures_are_recorded_and_the_run_continues() {
    // Bind then drop a listener so the port is very likely closed.
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let tmp = TempDir::new().unwrap();
    let mut cfg = config("mock_without_kb", tmp.path());
    let mut endpoint = ModelEndpointConfig::new(format!("http://127.0.0.1:{port}/v1"), "m");
    endpoint.max_retries = 0;
    endpoint.timeout_secs = 2;
    cfg.agent = AgentConfig::Model { endpoint };
    cfg.tasks_dir = copy_tasks(&["tasks_buy_milk", "xiazi_exam"], tmp.path());
    let summary = run_benchmark(cfg).unwrap();
    assert_eq!(summary.episodes.len(), 2);
    assert_eq!(summary.agent_failures().len(), 2);
    for ep in summary.episodes.values() {
        assert_eq!(ep.trace.end.terminal, TerminalCause::AgentFailure);
        assert!(ep.trace.end.error.is_some());
        assert_eq!(ep.metrics.cr, 0.0);
    }
}
