//! `kgce`: synthesize tasks, run benchmarks, re-evaluate traces, and report.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kgce_core::analysis::{self, RunAggregate};
use kgce_core::eval::{CpaDefinition, Metric};
use kgce_core::runner::{self, AgentConfig, RunConfig};
use kgce_core::schema;
use kgce_core::synthesis::{synthesize, BindingsFile, TaskTemplate};
use kgce_core::task_graph::{TaskGraph, TaskSpec};
use kgce_core::trace::Trace;
use kgce_core::agent::ModelEndpointConfig;

#[derive(Parser)]
#[command(name = "kgce", version, about = "Benchmark harness for cross-platform GUI agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Instantiate and compose task specs from templates.
    Synth {
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        bindings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every task and write traces, metrics and the run aggregate.
    Run(RunArgs),
    /// Re-evaluate a stored trace.
    Eval {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, value_enum, default_value_t = CpaArg::SubgoalsPerAction)]
        cpa: CpaArg,
    },
    /// Aggregates of each run plus the improvement table (first run is the baseline).
    Report {
        /// Run directories (or aggregate files): baseline first.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: String,
        /// Also include the pooled correlation matrix.
        #[arg(long)]
        correlate: bool,
    },
    /// Pearson matrix over per-episode metrics, pooled across runs.
    Correlate {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: String,
        /// Comma-separated metric names; defaults to all eight.
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<String>,
        /// Print each run's own matrix after the pooled one.
        #[arg(long)]
        per_run: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CpaArg {
    SubgoalsPerAction,
    EffectiveActions,
}

impl From<CpaArg> for CpaDefinition {
    fn from(a: CpaArg) -> Self {
        match a {
            CpaArg::SubgoalsPerAction => CpaDefinition::SubgoalsPerAction,
            CpaArg::EffectiveActions => CpaDefinition::EffectiveActions,
        }
    }
}

/// Either `--config`, or flags that build the config; flags override the file.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tasks: Option<PathBuf>,
    #[arg(long)]
    world: Option<PathBuf>,
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Scripted agent: directory of `<task_id>.json` scripts.
    #[arg(long, conflicts_with = "model_url")]
    scripts: Option<PathBuf>,
    /// Model agent endpoint (`http(s)://...` or `mock:<plan file>`).
    #[arg(long)]
    model_url: Option<String>,
    #[arg(long, default_value = "default")]
    model: String,
    #[arg(long, overrides_with = "no_kb")]
    kb_enabled: bool,
    #[arg(long)]
    no_kb: bool,
    #[arg(long)]
    kb_budget: Option<usize>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    label: Option<String>,
    #[arg(long, value_enum)]
    cpa: Option<CpaArg>,
}

impl RunArgs {
    fn into_config(self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => {
                let agent = match (&self.scripts, &self.model_url) {
                    (Some(dir), _) => AgentConfig::Scripted {
                        scripts_dir: dir.clone(),
                    },
                    (None, Some(url)) => AgentConfig::Model {
                        endpoint: ModelEndpointConfig::new(url.clone(), self.model.clone()),
                    },
                    (None, None) => bail!("without --config, one of --scripts or --model-url is required"),
                };
                RunConfig {
                    schema: schema::RUN.to_string(),
                    label: None,
                    tasks_dir: self.tasks.clone().context("--tasks is required without --config")?,
                    world: self.world.clone().context("--world is required without --config")?,
                    kb: None,
                    agent,
                    kb_enabled: false,
                    kb_budget: kgce_core::knowledge::DEFAULT_FRAGMENT_BUDGET,
                    parallelism: 1,
                    output_dir: self.output.clone().context("--output is required without --config")?,
                    seed: 0,
                    cpa_definition: CpaDefinition::default(),
                }
            }
        };
        if let Some(v) = self.tasks {
            cfg.tasks_dir = v;
        }
        if let Some(v) = self.world {
            cfg.world = v;
        }
        if let Some(v) = self.kb {
            cfg.kb = Some(v);
        }
        if let Some(dir) = self.scripts {
            cfg.agent = AgentConfig::Scripted { scripts_dir: dir };
        }
        if let Some(url) = self.model_url {
            cfg.agent = AgentConfig::Model {
                endpoint: ModelEndpointConfig::new(url, self.model),
            };
        }
        if self.kb_enabled {
            cfg.kb_enabled = true;
        }
        if self.no_kb {
            cfg.kb_enabled = false;
        }
        if let Some(v) = self.kb_budget {
            cfg.kb_budget = v;
        }
        if let Some(v) = self.parallelism {
            cfg.parallelism = v;
        }
        if let Some(v) = self.output {
            cfg.output_dir = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.label {
            cfg.label = Some(v);
        }
        if let Some(v) = self.cpa {
            cfg.cpa_definition = v.into();
        }
        Ok(cfg)
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("cannot open {}", path.display()))?,
    ))
}

fn synth(templates: &Path, bindings: &Path, out: &Path) -> Result<()> {
    let mut library = BTreeMap::new();
    for path in runner::json_files(templates)? {
        let t = TaskTemplate::from_reader(open(&path)?).with_context(|| path.display().to_string())?;
        if let Some(prev) = library.insert(t.template_id.clone(), t) {
            bail!("duplicate template id `{}`", prev.template_id);
        }
    }
    let file = BindingsFile::from_reader(open(bindings)?).with_context(|| bindings.display().to_string())?;
    let specs = synthesize(&library, &file)?;
    fs::create_dir_all(out)?;
    for spec in &specs {
        fs::write(out.join(format!("{}.json", spec.task_id)), spec.to_json())?;
    }
    eprintln!("wrote {} task(s) to {}", specs.len(), out.display());
    Ok(())
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let summary = runner::run_benchmark(args.into_config()?)?;
    let agg = &summary.aggregate;
    eprintln!(
        "{}: {} episode(s), CR {:.4}, F1 {:.4}, BR {:.4}",
        agg.label, agg.episodes, agg.cr, agg.f1, agg.br
    );
    let failures = summary.agent_failures();
    for (task, err) in &failures {
        eprintln!("agent failure on `{task}`: {err}");
    }
    Ok(if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn eval(trace: &Path, task: &Path, cpa: CpaDefinition) -> Result<()> {
    let spec = TaskSpec::from_reader(open(task)?).with_context(|| task.display().to_string())?;
    let graph = Arc::new(TaskGraph::new(spec)?);
    let trace = Trace::read_jsonl(open(trace)?).with_context(|| trace.display().to_string())?;
    let report = runner::evaluate_trace(&trace, &graph, cpa)?;
    std::io::stdout().write_all(report.to_json().as_bytes())?;
    Ok(())
}

fn load_aggregate(path: &Path) -> Result<RunAggregate> {
    if path.is_dir() {
        Ok(runner::load_run_aggregate(path)?)
    } else {
        Ok(RunAggregate::from_reader(open(path)?).with_context(|| path.display().to_string())?)
    }
}

fn run_label(dir: &Path) -> String {
    runner::load_run_aggregate(dir)
        .map(|a| a.label)
        .unwrap_or_else(|_| dir.display().to_string())
}

fn pooled_reports(runs: &[PathBuf]) -> Result<Vec<(String, Vec<kgce_core::eval::MetricsReport>)>> {
    runs.iter()
        .map(|dir| Ok((run_label(dir), runner::load_run_metrics(dir)?)))
        .collect()
}

fn report(runs: &[PathBuf], format: &str, correlate: bool) -> Result<()> {
    let aggregates = runs.iter().map(|p| load_aggregate(p)).collect::<Result<Vec<_>>>()?;
    let improvements = match aggregates.as_slice() {
        [without, with] => analysis::improvement(without, with),
        _ => Vec::new(),
    };
    let matrix = if correlate {
        let pooled: Vec<_> = pooled_reports(runs)?.into_iter().flat_map(|(_, r)| r).collect();
        Some(analysis::pearson_matrix(&pooled, &Metric::ALL)?)
    } else {
        None
    };
    let bytes = analysis::emit_report(&aggregates, &improvements, matrix.as_ref(), format)?;
    std::io::stdout().write_all(&bytes)?;
    Ok(())
}

fn correlate(runs: &[PathBuf], format: &str, metrics: &[String], per_run: bool) -> Result<()> {
    let metrics: Vec<Metric> = if metrics.is_empty() {
        Metric::ALL.to_vec()
    } else {
        metrics
            .iter()
            .map(|m| Metric::from_name(m).with_context(|| format!("unknown metric `{m}`")))
            .collect::<Result<_>>()?
    };
    let runs = pooled_reports(runs)?;
    let pooled: Vec<_> = runs.iter().flat_map(|(_, r)| r.iter().cloned()).collect();
    let matrix = analysis::pearson_matrix(&pooled, &metrics)?;
    let mut out = std::io::stdout().lock();
    out.write_all(&analysis::emit_correlation(&matrix, format)?)?;
    if per_run {
        for (label, reports) in &runs {
            writeln!(out, "# run {label}")?;
            match analysis::pearson_matrix(reports, &metrics) {
                Ok(m) => out.write_all(&analysis::emit_correlation(&m, format)?)?,
                Err(e) => writeln!(out, "# {e}")?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth {
            templates,
            bindings,
            out,
        } => synth(&templates, &bindings, &out).map(|_| ExitCode::SUCCESS),
        Command::Run(args) => run(args),
        Command::Eval { trace, task, cpa } => eval(&trace, &task, cpa.into()).map(|_| ExitCode::SUCCESS),
        Command::Report {
            runs,
            format,
            correlate: c,
        } => report(&runs, &format, c).map(|_| ExitCode::SUCCESS),
        Command::Correlate {
            runs,
            format,
            metrics,
            per_run,
        } => correlate(&runs, &format, &metrics, per_run).map(|_| ExitCode::SUCCESS),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
