//! Benchmark orchestration: load, run every task episode, evaluate, persist.
//!
//! Run directory layout:
//!
//! ```text
//! <output_dir>/traces/<task_id>.jsonl
//! <output_dir>/metrics/<task_id>.json
//! <output_dir>/aggregate.json
//! <output_dir>/aggregate.csv
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::mock::MockPlanFile;
use crate::agent::model::{ChatTransport, HttpTransport, BASE_URL_ENV};
use crate::agent::{
    parse_action, Agent, AgentError, AgentTurnInput, HistoryEntry, ModelAgent, ModelEndpointConfig, ScriptedAgent,
};
use crate::analysis::{aggregate, emit_report, RunAggregate};
use crate::env::{reset, Action, EnvError, Terminal, WorldModel};
use crate::eval::{evaluate_episode, CompletionTracker, CpaDefinition, EvalError, MetricsReport, TerminalCause};
use crate::knowledge::{decide_invocation, load_kb, render_prompt_fragment, KnowledgeBase, DEFAULT_FRAGMENT_BUDGET};
use crate::schema;
use crate::task_graph::{TaskGraph, TaskSpec};
use crate::trace::{Trace, TraceEnd, TraceHeader, TraceStep};

const MOCK_PREFIX: &str = "mock:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentConfig {
    Scripted { scripts_dir: PathBuf },
    Model { endpoint: ModelEndpointConfig },
}

fn default_budget() -> usize {
    DEFAULT_FRAGMENT_BUDGET
}
fn default_parallelism() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema: String,
    /// Defaults to `with_kb` / `without_kb`.
    #[serde(default)]
    pub label: Option<String>,
    pub tasks_dir: PathBuf,
    pub world: PathBuf,
    #[serde(default)]
    pub kb: Option<PathBuf>,
    pub agent: AgentConfig,
    #[serde(default)]
    pub kb_enabled: bool,
    #[serde(default = "default_budget")]
    pub kb_budget: usize,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    pub output_dir: PathBuf,
    /// Carried for randomized fixtures; the episode loop itself is deterministic.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub cpa_definition: CpaDefinition,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Load { path: PathBuf, message: String },
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("task `{task}`: {source}")]
    Env { task: String, source: EnvError },
    #[error("task `{task}`: {source}")]
    Eval { task: String, source: EvalError },
    #[error(transparent)]
    Analysis(#[from] crate::analysis::AnalysisError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_err(path: &Path, message: impl ToString) -> RunError {
    RunError::Load {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn open(path: &Path) -> Result<BufReader<File>, RunError> {
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Reads a config file; relative paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let mut cfg: RunConfig = serde_json::from_reader(open(path)?).map_err(|e| load_err(path, e))?;
        schema::expect(schema::RUN, &cfg.schema).map_err(|e| load_err(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        self.tasks_dir = resolve(base, &self.tasks_dir);
        self.world = resolve(base, &self.world);
        self.output_dir = resolve(base, &self.output_dir);
        if let Some(kb) = &mut self.kb {
            *kb = resolve(base, kb);
        }
        match &mut self.agent {
            AgentConfig::Scripted { scripts_dir } => *scripts_dir = resolve(base, scripts_dir),
            AgentConfig::Model { endpoint } => {
                if let Some(plan) = endpoint.base_url.strip_prefix(MOCK_PREFIX) {
                    let plan = resolve(base, Path::new(plan));
                    endpoint.base_url = format!("{MOCK_PREFIX}{}", plan.display());
                }
            }
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| {
            if self.kb_enabled { "with_kb" } else { "without_kb" }.to_string()
        })
    }

    pub fn validate(&self) -> Result<(), RunError> {
        schema::expect(schema::RUN, &self.schema).map_err(|e| RunError::Config(e.to_string()))?;
        if self.parallelism == 0 {
            return Err(RunError::Config("parallelism must be positive".into()));
        }
        if self.kb_enabled && self.kb.is_none() {
            return Err(RunError::Config("kb_enabled requires a kb file".into()));
        }
        if let AgentConfig::Model { endpoint } = &self.agent {
            endpoint.validate().map_err(RunError::Config)?;
        }
        Ok(())
    }
}

/// A scripted agent's action list for one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptFile {
    pub schema: String,
    pub task_id: String,
    /// Actions in the reply grammar, e.g. `tap(course_bd)`.
    pub actions: Vec<String>,
}

impl ScriptFile {
    pub fn parse_actions(&self) -> Result<Vec<Action>, String> {
        self.actions
            .iter()
            .enumerate()
            .map(|(i, text)| {
                let parsed = parse_action(text).map_err(|f| format!("actions[{i}]: {f}"))?;
                if parsed.span != (0..text.len()) {
                    return Err(format!("actions[{i}]: `{text}` is not a single bare action"));
                }
                Ok(parsed.action)
            })
            .collect()
    }
}

enum AgentSource {
    Scripts(BTreeMap<String, Vec<Action>>),
    Mock(ModelEndpointConfig, MockPlanFile),
    Live(ModelEndpointConfig, Arc<HttpTransport>),
}

impl AgentSource {
    fn make(&self, task_id: &str) -> Box<dyn Agent> {
        match self {
            AgentSource::Scripts(scripts) => Box::new(ScriptedAgent::new(scripts[task_id].clone())),
            AgentSource::Mock(cfg, plans) => {
                let transport: Arc<dyn ChatTransport> = Arc::new(plans.transport_for(task_id));
                Box::new(ModelAgent::new(cfg.clone(), transport))
            }
            AgentSource::Live(cfg, http) => {
                let transport: Arc<dyn ChatTransport> = http.clone();
                Box::new(ModelAgent::new(cfg.clone(), transport))
            }
        }
    }
}

/// Everything a run needs, loaded and validated up front.
pub struct Prepared {
    pub config: RunConfig,
    pub tasks: Vec<Arc<TaskGraph>>,
    pub world: Arc<WorldModel>,
    pub kb: KnowledgeBase,
    agents: AgentSource,
}

/// Task files (`*.json`) in `dir`, sorted by task id.
pub fn load_tasks(dir: &Path) -> Result<Vec<Arc<TaskGraph>>, RunError> {
    let mut tasks = Vec::new();
    for path in json_files(dir)? {
        let spec = TaskSpec::from_reader(open(&path)?).map_err(|e| load_err(&path, e))?;
        let graph = TaskGraph::new(spec).map_err(|e| load_err(&path, e))?;
        tasks.push(Arc::new(graph));
    }
    tasks.sort_by(|a, b| a.spec().task_id.cmp(&b.spec().task_id));
    if let Some(w) = tasks.windows(2).find(|w| w[0].spec().task_id == w[1].spec().task_id) {
        return Err(load_err(dir, format!("duplicate task id `{}`", w[0].spec().task_id)));
    }
    Ok(tasks)
}

pub fn json_files(dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<_, _>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "json"));
    files.sort();
    Ok(files)
}

fn load_scripts(dir: &Path, tasks: &[Arc<TaskGraph>]) -> Result<BTreeMap<String, Vec<Action>>, RunError> {
    let mut scripts = BTreeMap::new();
    for task in tasks {
        let id = &task.spec().task_id;
        let path = dir.join(format!("{id}.json"));
        let file: ScriptFile = serde_json::from_reader(open(&path)?).map_err(|e| load_err(&path, e))?;
        schema::expect(schema::SCRIPT, &file.schema).map_err(|e| load_err(&path, e))?;
        if &file.task_id != id {
            return Err(load_err(&path, format!("script is for task `{}`", file.task_id)));
        }
        scripts.insert(id.clone(), file.parse_actions().map_err(|e| load_err(&path, e))?);
    }
    Ok(scripts)
}

/// Loads and cross-checks every input. Nothing runs if this fails.
pub fn prepare(config: RunConfig) -> Result<Prepared, RunError> {
    config.validate()?;
    let world = WorldModel::from_reader(open(&config.world)?).map_err(|e| load_err(&config.world, e))?;
    let tasks = load_tasks(&config.tasks_dir)?;
    if tasks.is_empty() {
        return Err(load_err(&config.tasks_dir, "no task files"));
    }
    let available = world.platforms();
    for t in &tasks {
        if let Some(p) = t.spec().platforms.iter().find(|p| !available.contains(p)) {
            return Err(RunError::Env {
                task: t.spec().task_id.clone(),
                source: EnvError::PlatformUnavailable(*p),
            });
        }
        CompletionTracker::attach(Arc::clone(t)).map_err(|source| RunError::Eval {
            task: t.spec().task_id.clone(),
            source,
        })?;
    }
    let kb = match &config.kb {
        Some(path) => load_kb(open(path)?).map_err(|e| load_err(path, e))?,
        None => KnowledgeBase::default(),
    };
    let agents = match &config.agent {
        AgentConfig::Scripted { scripts_dir } => AgentSource::Scripts(load_scripts(scripts_dir, &tasks)?),
        AgentConfig::Model { endpoint } => {
            let mut endpoint = endpoint.clone();
            if endpoint.base_url.is_empty() {
                endpoint.base_url = std::env::var(BASE_URL_ENV).unwrap_or_default();
            }
            if let Some(plan) = endpoint.base_url.strip_prefix(MOCK_PREFIX) {
                let path = PathBuf::from(plan);
                let plans = MockPlanFile::from_reader(open(&path)?).map_err(|e| load_err(&path, e))?;
                AgentSource::Mock(endpoint, plans)
            } else {
                endpoint.validate().map_err(RunError::Config)?;
                let http = HttpTransport::new(&endpoint).map_err(|e| RunError::Config(e.to_string()))?;
                AgentSource::Live(endpoint, Arc::new(http))
            }
        }
    };
    Ok(Prepared {
        config,
        tasks,
        world: Arc::new(world),
        kb,
        agents,
    })
}

/// One task's outcome.
#[derive(Debug, Clone)]
pub struct Episode {
    pub trace: Trace,
    pub metrics: MetricsReport,
}

/// Runs one episode: observe, ask the agent, step, check sub-goals, repeat.
pub fn run_episode(
    task: &Arc<TaskGraph>,
    world: Arc<WorldModel>,
    kb: &KnowledgeBase,
    kb_enabled: bool,
    kb_budget: usize,
    agent: &mut dyn Agent,
) -> Result<Trace, RunError> {
    let spec = task.spec();
    let env_err = |source| RunError::Env {
        task: spec.task_id.clone(),
        source,
    };
    let mut session = reset(world, spec).map_err(env_err)?;
    let mut tracker = CompletionTracker::attach(Arc::clone(task)).map_err(|source| RunError::Eval {
        task: spec.task_id.clone(),
        source,
    })?;

    let kb_packages = if kb_enabled {
        decide_invocation(&spec.instruction, &kb.packages)
    } else {
        Vec::new()
    };
    let kb_fragment = if kb_packages.is_empty() {
        String::new()
    } else {
        render_prompt_fragment(&kb.select(&kb_packages), kb_budget)
    };

    let header = TraceHeader {
        schema: schema::TRACE.to_string(),
        task_id: spec.task_id.clone(),
        agent: agent.kind().to_string(),
        kb_packages,
        initial_signature: session.signature().0,
    };
    let mut steps: Vec<TraceStep> = Vec::new();
    let mut history: Vec<HistoryEntry> = Vec::new();
    let mut error = None;

    let terminal = loop {
        let input = AgentTurnInput {
            instruction: spec.instruction.clone(),
            observation: session.observe(),
            kb_fragment: kb_fragment.clone(),
            history: history.clone(),
            remaining_steps: session.max_steps() - session.step_count(),
        };
        let (result, action, raw_reply, parse_error) = match agent.next_action(&input) {
            Ok(Action::Done) => {
                session.step(&Action::Done).map_err(env_err)?;
                break TerminalCause::DoneSignaled;
            }
            Ok(a) => (session.step(&a).map_err(env_err)?, Some(a), None, None),
            Err(AgentError::Parse { raw, failure }) => {
                (session.step_unparsed().map_err(env_err)?, None, Some(raw), Some(failure.to_string()))
            }
            Err(AgentError::ScriptExhausted) => break TerminalCause::ScriptExhausted,
            Err(AgentError::Transport(e)) => {
                error = Some(e.to_string());
                break TerminalCause::AgentFailure;
            }
        };
        let index = steps.len() + 1;
        let completed = tracker.observe(&session, index);
        let rendered = action.as_ref().map(ToString::to_string);
        history.push(HistoryEntry::new(
            rendered.clone().unwrap_or_else(|| "(unparseable reply)".to_string()),
            &result.flags,
        ));
        steps.push(TraceStep {
            index,
            is_back_action: matches!(action, Some(Action::Back)),
            action: rendered,
            raw_reply,
            parse_error,
            flags: result.flags,
            pre_signature: result.pre_signature.0,
            post_signature: result.post_signature.0,
            observation_digest: result.observation.digest(),
            completed,
        });
        if result.terminal == Terminal::MaxStepsReached {
            break TerminalCause::MaxStepsReached;
        }
    };

    Ok(Trace {
        header,
        end: TraceEnd {
            terminal,
            steps: steps.len(),
            error,
        },
        steps,
    })
}

pub fn evaluate_trace(trace: &Trace, task: &Arc<TaskGraph>, cpa: CpaDefinition) -> Result<MetricsReport, RunError> {
    let eval_err = |source| RunError::Eval {
        task: task.spec().task_id.clone(),
        source,
    };
    let episode = trace
        .to_episode(Arc::clone(task))
        .map_err(|e| load_err(Path::new(&task.spec().task_id), e))?;
    evaluate_episode(&episode, cpa).map_err(eval_err)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    /// Keyed by task id.
    pub episodes: BTreeMap<String, Episode>,
    pub aggregate: RunAggregate,
}

impl RunSummary {
    /// Tasks whose agent failed to answer (the run continued past them).
    pub fn agent_failures(&self) -> Vec<(&str, &str)> {
        self.episodes
            .iter()
            .filter(|(_, e)| e.trace.end.terminal == TerminalCause::AgentFailure)
            .map(|(id, e)| (id.as_str(), e.trace.end.error.as_deref().unwrap_or("")))
            .collect()
    }
}

/// Executes every episode over a pool of `parallelism` workers and writes the
/// run directory. Output is independent of scheduling.
pub fn execute(prepared: &Prepared) -> Result<RunSummary, RunError> {
    let cfg = &prepared.config;
    let next = AtomicUsize::new(0);
    let results: Mutex<BTreeMap<String, Result<Episode, RunError>>> = Mutex::new(BTreeMap::new());
    let workers = cfg.parallelism.min(prepared.tasks.len()).max(1);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(task) = prepared.tasks.get(i) else { break };
                let id = task.spec().task_id.clone();
                let mut agent = prepared.agents.make(&id);
                let outcome = run_episode(
                    task,
                    Arc::clone(&prepared.world),
                    &prepared.kb,
                    cfg.kb_enabled,
                    cfg.kb_budget,
                    agent.as_mut(),
                )
                .and_then(|trace| {
                    let metrics = evaluate_trace(&trace, task, cfg.cpa_definition)?;
                    Ok(Episode { trace, metrics })
                });
                results.lock().expect("results lock").insert(id, outcome);
            });
        }
    });

    let episodes = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|(id, r)| r.map(|e| (id, e)))
        .collect::<Result<BTreeMap<_, _>, _>>()?;
    let reports: Vec<MetricsReport> = episodes.values().map(|e| e.metrics.clone()).collect();
    let aggregate = aggregate(&reports, &cfg.label())?;
    let summary = RunSummary { episodes, aggregate };
    write_run_dir(&cfg.output_dir, &summary)?;
    Ok(summary)
}

pub fn run_benchmark(config: RunConfig) -> Result<RunSummary, RunError> {
    execute(&prepare(config)?)
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_run_dir(dir: &Path, summary: &RunSummary) -> Result<(), RunError> {
    let traces = dir.join("traces");
    let metrics = dir.join("metrics");
    for d in [&traces, &metrics] {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    for (id, ep) in &summary.episodes {
        write(&traces.join(format!("{id}.jsonl")), ep.trace.to_jsonl().as_bytes())?;
        write(&metrics.join(format!("{id}.json")), ep.metrics.to_json().as_bytes())?;
    }
    write(&dir.join("aggregate.json"), summary.aggregate.to_json().as_bytes())?;
    let csv = emit_report(std::slice::from_ref(&summary.aggregate), &[], None, "csv")?;
    write(&dir.join("aggregate.csv"), &csv)
}

/// Reads `metrics/*.json` from a run directory, in task id order.
pub fn load_run_metrics(dir: &Path) -> Result<Vec<MetricsReport>, RunError> {
    json_files(&dir.join("metrics"))?
        .iter()
        .map(|path| {
            let report: MetricsReport = serde_json::from_reader(open(path)?).map_err(|e| load_err(path, e))?;
            schema::expect(schema::METRICS, &report.schema).map_err(|e| load_err(path, e))?;
            Ok(report)
        })
        .collect()
}

pub fn load_run_aggregate(dir: &Path) -> Result<RunAggregate, RunError> {
    let path = dir.join("aggregate.json");
    RunAggregate::from_reader(open(&path)?).map_err(|e| load_err(&path, e))
}
