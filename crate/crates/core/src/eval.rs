//! Dual-graph episode evaluation.
//!
//! The completeness view scores sub-goal progress on the task DAG (CR, CPA,
//! key-step Recall). The efficiency view scores the action sequence
//! (Precision, F1, BR, out-of-range rate, step-budget exhaustion).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checker::{Checker, CheckerError};
use crate::env::{Session, StepFlags};
use crate::schema;
use crate::task_graph::{CompletionState, GraphError, TaskGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalCause {
    DoneSignaled,
    MaxStepsReached,
    ScriptExhausted,
    /// The agent could not produce a reply (transport failure after retries).
    AgentFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Rendered action; `None` when the agent's reply did not parse.
    pub action: Option<String>,
    pub flags: StepFlags,
    pub is_back_action: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeRecord {
    pub task: Arc<TaskGraph>,
    pub steps: Vec<StepRecord>,
    /// `(node id, step index)`; step indices are 1-based.
    pub completion_order: Vec<(String, usize)>,
    pub terminal: TerminalCause,
}

/// How CPA's numerator is read.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CpaDefinition {
    /// Share of executed actions that completed a sub-goal. Equals completed
    /// sub-goals per action unless one step completes several at once.
    #[default]
    SubgoalsPerAction,
    /// Effective actions over executed actions (numerically equal to Precision).
    EffectiveActions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub nodes: usize,
    pub completed_nodes: usize,
    /// Steps that completed at least one sub-goal (CPA numerator).
    pub completing_steps: usize,
    pub key_steps: usize,
    pub covered_key_steps: usize,
    pub onu: usize,
    pub can: usize,
    pub io: usize,
    pub oor_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub task_id: String,
    pub terminal: TerminalCause,
    pub cpa_definition: CpaDefinition,
    pub cr: f64,
    pub cpa: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub br: f64,
    pub oor_rate: f64,
    pub rms: bool,
    pub counts: MetricCounts,
}

/// The eight reported metrics, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "CR")]
    Cr,
    #[serde(rename = "CPA")]
    Cpa,
    Precision,
    Recall,
    F1,
    #[serde(rename = "BR")]
    Br,
    #[serde(rename = "OoR")]
    Oor,
    #[serde(rename = "RMS")]
    Rms,
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::Cr,
        Metric::Cpa,
        Metric::Precision,
        Metric::Recall,
        Metric::F1,
        Metric::Br,
        Metric::Oor,
        Metric::Rms,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Cr => "CR",
            Metric::Cpa => "CPA",
            Metric::Precision => "Precision",
            Metric::Recall => "Recall",
            Metric::F1 => "F1",
            Metric::Br => "BR",
            Metric::Oor => "OoR",
            Metric::Rms => "RMS",
        }
    }

    pub fn from_name(name: &str) -> Option<Metric> {
        Metric::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(name))
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl MetricsReport {
    /// Metric value as a number; RMS is 1.0 when the budget was hit.
    pub fn value(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Cr => self.cr,
            Metric::Cpa => self.cpa,
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
            Metric::F1 => self.f1,
            Metric::Br => self.br,
            Metric::Oor => self.oor_rate,
            Metric::Rms => f64::from(u8::from(self.rms)),
        }
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("metrics serialise");
        out.push('\n');
        out
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("malformed episode: {0}")]
    InvariantViolation(String),
    #[error("node `{node}`: {source}")]
    UnknownChecker { node: String, source: CheckerError },
}

/// A step counts as backtracking when it is an explicit back action or lands
/// on a state signature seen earlier in the episode.
pub fn classify_backtrack(step: &StepRecord) -> bool {
    step.is_back_action || step.flags.revisit
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn replay_completion(ep: &EpisodeRecord) -> Result<CompletionState, EvalError> {
    let violation = |msg: String| EvalError::InvariantViolation(msg);
    let mut state = CompletionState::new(Arc::clone(&ep.task));
    for (node, step) in &ep.completion_order {
        if *step > ep.steps.len() {
            return Err(violation(format!(
                "node `{node}` completes at step {step} but the episode has {} steps",
                ep.steps.len()
            )));
        }
        if state.is_complete(node) {
            return Err(violation(format!("node `{node}` completes twice")));
        }
        state = state.mark_complete(node, *step).map_err(|e: GraphError| violation(e.to_string()))?;
    }
    Ok(state)
}

pub fn evaluate_episode(ep: &EpisodeRecord, cpa_definition: CpaDefinition) -> Result<MetricsReport, EvalError> {
    let spec = ep.task.spec();
    if ep.steps.len() > spec.max_steps {
        return Err(EvalError::InvariantViolation(format!(
            "{} steps exceed the budget of {}",
            ep.steps.len(),
            spec.max_steps
        )));
    }
    if ep.terminal == TerminalCause::MaxStepsReached && ep.steps.len() != spec.max_steps {
        return Err(EvalError::InvariantViolation(format!(
            "budget exhaustion after {} of {} steps",
            ep.steps.len(),
            spec.max_steps
        )));
    }
    if let Some(i) = ep
        .steps
        .iter()
        .position(|s| s.flags.out_of_range && s.flags.effect_applied)
    {
        return Err(EvalError::InvariantViolation(format!(
            "step {} is out of range yet applied an effect",
            i + 1
        )));
    }
    let completion = replay_completion(ep)?;

    let completed = completion.completed();
    let key: BTreeSet<&str> = spec.key_steps().map(|n| n.id.as_str()).collect();
    let counts = MetricCounts {
        nodes: spec.nodes.len(),
        completed_nodes: completed.len(),
        completing_steps: ep.completion_order.iter().map(|(_, s)| *s).collect::<BTreeSet<_>>().len(),
        key_steps: key.len(),
        covered_key_steps: key.iter().filter(|k| completed.contains(**k)).count(),
        onu: ep.steps.len(),
        can: ep.steps.iter().filter(|s| s.flags.effect_applied).count(),
        io: ep.steps.iter().filter(|s| classify_backtrack(s)).count(),
        oor_count: ep.steps.iter().filter(|s| s.flags.out_of_range).count(),
    };

    let precision = ratio(counts.can, counts.onu);
    let recall = if counts.key_steps == 0 {
        1.0
    } else {
        ratio(counts.covered_key_steps, counts.key_steps)
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let cpa = match cpa_definition {
        // Counting steps rather than nodes keeps CPA a ratio when one step
        // completes parallel sub-goals together.
        CpaDefinition::SubgoalsPerAction => ratio(counts.completing_steps, counts.onu),
        CpaDefinition::EffectiveActions => precision,
    };

    Ok(MetricsReport {
        schema: schema::METRICS.to_string(),
        task_id: spec.task_id.clone(),
        terminal: ep.terminal,
        cpa_definition,
        cr: ratio(counts.completed_nodes, counts.nodes),
        cpa,
        precision,
        recall,
        f1,
        br: ratio(counts.io, counts.onu),
        oor_rate: ratio(counts.oor_count, counts.onu),
        rms: ep.terminal == TerminalCause::MaxStepsReached,
        counts,
    })
}

/// Watches a session step by step and completes sub-goals whose checkers hold.
///
/// Only frontier nodes are checked, in topological order, so a node whose
/// predecessors complete earlier in the same pass is eligible in that pass.
#[derive(Debug, Clone)]
pub struct CompletionTracker {
    state: CompletionState,
    checkers: BTreeMap<String, Checker>,
}

impl CompletionTracker {
    pub fn attach(graph: Arc<TaskGraph>) -> Result<Self, EvalError> {
        let checkers = graph
            .spec()
            .nodes
            .iter()
            .map(|n| {
                Checker::resolve(&n.checker)
                    .map(|c| (n.id.clone(), c))
                    .map_err(|source| EvalError::UnknownChecker {
                        node: n.id.clone(),
                        source,
                    })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            state: CompletionState::new(graph),
            checkers,
        })
    }

    /// Evaluates checkers after step `step`; returns the newly completed ids.
    pub fn observe(&mut self, session: &Session, step: usize) -> Vec<String> {
        let mut fired = Vec::new();
        let graph = Arc::clone(self.state.graph());
        for id in graph.topo_order() {
            if self.state.is_complete(id) {
                continue;
            }
            let ready = graph
                .predecessors(id)
                .is_some_and(|preds| preds.iter().all(|p| self.state.is_complete(p)));
            if ready && self.checkers[id].holds(session) {
                self.state = self
                    .state
                    .mark_complete(id, step)
                    .expect("frontier node with monotone step");
                fired.push(id.clone());
            }
        }
        fired
    }

    pub fn state(&self) -> &CompletionState {
        &self.state
    }
}

/// Runs a tracker over `(step index, session state)` pairs.
pub fn attach_checkers<'a>(
    graph: Arc<TaskGraph>,
    states: impl IntoIterator<Item = (usize, &'a Session)>,
) -> Result<CompletionState, EvalError> {
    let mut tracker = CompletionTracker::attach(graph)?;
    for (step, session) in states {
        tracker.observe(session, step);
    }
    Ok(tracker.state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_graph::fixtures;

    fn graph() -> Arc<TaskGraph> {
        Arc::new(TaskGraph::new(fixtures::chain()).unwrap())
    }

    fn step(flags: StepFlags, back: bool) -> StepRecord {
        StepRecord {
            action: Some(if back { "back()" } else { "tap(x)" }.into()),
            flags,
            is_back_action: back,
        }
    }

    fn applied() -> StepFlags {
        StepFlags {
            effect_applied: true,
            ..StepFlags::default()
        }
    }

    fn golden() -> EpisodeRecord {
        let ids = ["open", "enter", "view", "switch", "add"];
        EpisodeRecord {
            task: graph(),
            steps: (0..5).map(|_| step(applied(), false)).collect(),
            completion_order: ids.iter().enumerate().map(|(i, id)| (id.to_string(), i + 1)).collect(),
            terminal: TerminalCause::DoneSignaled,
        }
    }

    #[test]
    fn golden_episode_is_perfect() {
        let m = evaluate_episode(&golden(), CpaDefinition::default()).unwrap();
        assert_eq!((m.cr, m.cpa, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0, 1.0));
        assert_eq!((m.br, m.oor_rate, m.rms), (0.0, 0.0, false));
        assert_eq!(m.counts.onu, 5);
        assert_eq!(m.counts.can, 5);
        assert_eq!(m.counts.io, 0);
        assert_eq!(m.counts.key_steps, 5);
    }

    #[test]
    fn empty_episode_is_all_zero() {
        let ep = EpisodeRecord {
            task: graph(),
            steps: vec![],
            completion_order: vec![],
            terminal: TerminalCause::ScriptExhausted,
        };
        let m = evaluate_episode(&ep, CpaDefinition::default()).unwrap();
        assert_eq!(
            (m.cr, m.cpa, m.precision, m.recall, m.f1, m.br, m.oor_rate, m.rms),
            (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, false)
        );
    }

    #[test]
    fn three_backs_in_ten_steps() {
        let mut ep = golden();
        ep.steps = (0..10).map(|i| step(applied(), i < 3)).collect();
        let m = evaluate_episode(&ep, CpaDefinition::default()).unwrap();
        assert_eq!(m.br, 0.3);
        assert_eq!(m.cpa, 0.5);
    }

    #[test]
    fn golden_with_redundant_backs() {
        for n in 1..=3usize {
            let mut ep = golden();
            ep.steps.extend((0..n).map(|_| step(applied(), true)));
            let m = evaluate_episode(&ep, CpaDefinition::default()).unwrap();
            assert_eq!(m.br, n as f64 / (5 + n) as f64);
            assert_eq!(m.cr, 1.0);
        }
    }

    #[test]
    fn literal_cpa_matches_precision() {
        let mut ep = golden();
        ep.steps.push(step(StepFlags::default(), false));
        let m = evaluate_episode(&ep, CpaDefinition::EffectiveActions).unwrap();
        assert_eq!(m.cpa, m.precision);
        assert_eq!(m.cpa, 5.0 / 6.0);
    }

    #[test]
    fn out_of_range_step_lowers_precision_and_cpa() {
        let base = evaluate_episode(&golden(), CpaDefinition::default()).unwrap();
        let mut ep = golden();
        ep.steps.push(step(
            StepFlags {
                out_of_range: true,
                revisit: true,
                ..StepFlags::default()
            },
            false,
        ));
        let m = evaluate_episode(&ep, CpaDefinition::default()).unwrap();
        assert_eq!(m.cr, base.cr);
        assert_eq!(m.counts.can, base.counts.can);
        assert_eq!(m.counts.covered_key_steps, base.counts.covered_key_steps);
        assert!(m.precision < base.precision);
        assert!(m.cpa < base.cpa);
        assert_eq!(m.oor_rate, 1.0 / 6.0);
    }

    #[test]
    fn recall_is_vacuous_without_key_steps() {
        let mut spec = fixtures::chain();
        for n in &mut spec.nodes {
            n.key_step = false;
        }
        let ep = EpisodeRecord {
            task: Arc::new(TaskGraph::new(spec).unwrap()),
            ..golden()
        };
        assert_eq!(evaluate_episode(&ep, CpaDefinition::default()).unwrap().recall, 1.0);
    }

    #[test]
    fn malformed_episodes_are_rejected() {
        let mut ep = golden();
        ep.completion_order.swap(0, 1);
        assert!(matches!(
            evaluate_episode(&ep, CpaDefinition::default()),
            Err(EvalError::InvariantViolation(_))
        ));
        let mut ep = golden();
        ep.completion_order[4].1 = 6;
        assert!(evaluate_episode(&ep, CpaDefinition::default()).is_err());
        let mut ep = golden();
        ep.steps[0].flags.out_of_range = true;
        assert!(evaluate_episode(&ep, CpaDefinition::default()).is_err());
        let mut ep = golden();
        ep.terminal = TerminalCause::MaxStepsReached;
        assert!(evaluate_episode(&ep, CpaDefinition::default()).is_err());
        let mut ep = golden();
        ep.completion_order.push(("open".into(), 5));
        assert!(evaluate_episode(&ep, CpaDefinition::default()).is_err());
    }

    #[test]
    fn parallel_completions_count_one_action() {
        let ep = EpisodeRecord {
            task: Arc::new(TaskGraph::new(fixtures::diamond()).unwrap()),
            steps: (0..3).map(|_| step(applied(), false)).collect(),
            completion_order: vec![("a".into(), 1), ("b".into(), 2), ("c".into(), 2), ("d".into(), 3)],
            terminal: TerminalCause::DoneSignaled,
        };
        let m = evaluate_episode(&ep, CpaDefinition::default()).unwrap();
        assert_eq!(m.counts.completed_nodes, 4);
        assert_eq!(m.counts.completing_steps, 3);
        assert_eq!(m.cpa, 1.0);
        assert_eq!(m.cr, 1.0);
    }

    #[test]
    fn classify_backtrack_cases() {
        assert!(classify_backtrack(&step(applied(), true)));
        assert!(!classify_backtrack(&step(applied(), false)));
        let revisit = StepFlags {
            revisit: true,
            ..applied()
        };
        assert!(classify_backtrack(&step(revisit, false)));
    }

    #[test]
    fn unknown_checker_fails_at_attach() {
        let mut spec = fixtures::chain();
        spec.nodes[3].checker.predicate = "mind_read".into();
        let graph = Arc::new(TaskGraph::new(spec).unwrap());
        assert!(matches!(
            CompletionTracker::attach(graph),
            Err(EvalError::UnknownChecker { node, .. }) if node == "switch"
        ));
    }
}
