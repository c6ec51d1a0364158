//! Tasks as DAGs of sub-goals, and completion tracking over them.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use std::io::Read;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checker::{Checker, CheckerError, CheckerSpec};
use crate::platform::Platform;
use crate::schema;

/// Step budget applied when a task document omits `max_steps`.
pub const DEFAULT_MAX_STEPS: usize = 30;

fn default_max_steps() -> usize {
    DEFAULT_MAX_STEPS
}

fn task_schema() -> String {
    schema::TASK.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubGoalNode {
    pub id: String,
    pub description: String,
    #[serde(default)]
    pub key_step: bool,
    pub checker: CheckerSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(default = "task_schema")]
    pub schema: String,
    pub task_id: String,
    pub instruction: String,
    pub nodes: Vec<SubGoalNode>,
    #[serde(default)]
    pub edges: Vec<(String, String)>,
    /// Ordered without duplicates; the first entry is where the episode starts.
    pub platforms: Vec<Platform>,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    NoNodes,
    ZeroMaxSteps,
    DuplicateId { id: String },
    DanglingEdge { from: String, to: String, missing: String },
    /// Node sequence of the cycle, first node repeated at the end.
    Cycle { path: Vec<String> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoNodes => write!(f, "task has no sub-goal nodes"),
            Violation::ZeroMaxSteps => write!(f, "max_steps must be at least 1"),
            Violation::DuplicateId { id } => write!(f, "duplicate node id `{id}`"),
            Violation::DanglingEdge { from, to, missing } => {
                write!(f, "edge ({from}, {to}) references unknown node `{missing}`")
            }
            Violation::Cycle { path } => write!(f, "cycle {}", path.join(" -> ")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        let parts: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        write!(f, "{}", parts.join("; "))
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid task graph: {0}")]
    Invalid(ValidationReport),
    #[error("task graph contains a cycle")]
    Cyclic,
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("node `{node}` has incomplete predecessors: {}", missing.join(", "))]
    PredecessorIncomplete { node: String, missing: Vec<String> },
    #[error("completion at step {step} precedes last completion at step {last}")]
    StepRegression { step: usize, last: usize },
}

#[derive(Debug, Error)]
pub enum TaskLoadError {
    #[error("malformed task document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Schema(#[from] schema::SchemaMismatch),
    #[error("task `{task}`: {report}")]
    Invalid { task: String, report: ValidationReport },
    #[error("task `{task}` node `{node}`: {source}")]
    Checker {
        task: String,
        node: String,
        source: CheckerError,
    },
    #[error("task `{0}` lists a platform twice")]
    DuplicatePlatform(String),
    #[error("task `{0}` declares no platform")]
    NoPlatform(String),
}

impl TaskSpec {
    pub fn from_reader(reader: impl Read) -> Result<Self, TaskLoadError> {
        let spec: TaskSpec = serde_json::from_reader(reader)?;
        spec.check()?;
        Ok(spec)
    }

    pub fn from_json(text: &str) -> Result<Self, TaskLoadError> {
        Self::from_reader(text.as_bytes())
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("task serialises");
        out.push('\n');
        out
    }

    /// Full load-time validation: schema tag, DAG structure, platforms and
    /// checker resolution.
    pub fn check(&self) -> Result<(), TaskLoadError> {
        schema::expect(schema::TASK, &self.schema)?;
        let report = validate_dag(self);
        if !report.is_ok() {
            return Err(TaskLoadError::Invalid {
                task: self.task_id.clone(),
                report,
            });
        }
        if self.platforms.is_empty() {
            return Err(TaskLoadError::NoPlatform(self.task_id.clone()));
        }
        let unique: BTreeSet<_> = self.platforms.iter().collect();
        if unique.len() != self.platforms.len() {
            return Err(TaskLoadError::DuplicatePlatform(self.task_id.clone()));
        }
        for node in &self.nodes {
            Checker::resolve(&node.checker).map_err(|source| TaskLoadError::Checker {
                task: self.task_id.clone(),
                node: node.id.clone(),
                source,
            })?;
        }
        Ok(())
    }

    pub fn node(&self, id: &str) -> Option<&SubGoalNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn key_steps(&self) -> impl Iterator<Item = &SubGoalNode> {
        self.nodes.iter().filter(|n| n.key_step)
    }

    /// Nodes with no incoming edge, in id order.
    pub fn sources(&self) -> Vec<String> {
        let targets: BTreeSet<&str> = self.edges.iter().map(|(_, t)| t.as_str()).collect();
        let mut out: Vec<String> = self
            .nodes
            .iter()
            .filter(|n| !targets.contains(n.id.as_str()))
            .map(|n| n.id.clone())
            .collect();
        out.sort();
        out
    }

    /// Nodes with no outgoing edge, in id order.
    pub fn sinks(&self) -> Vec<String> {
        let origins: BTreeSet<&str> = self.edges.iter().map(|(f, _)| f.as_str()).collect();
        let mut out: Vec<String> = self
            .nodes
            .iter()
            .filter(|n| !origins.contains(n.id.as_str()))
            .map(|n| n.id.clone())
            .collect();
        out.sort();
        out
    }
}

fn adjacency(spec: &TaskSpec) -> BTreeMap<&str, BTreeSet<&str>> {
    let mut adj: BTreeMap<&str, BTreeSet<&str>> =
        spec.nodes.iter().map(|n| (n.id.as_str(), BTreeSet::new())).collect();
    for (from, to) in &spec.edges {
        if adj.contains_key(to.as_str()) {
            if let Some(out) = adj.get_mut(from.as_str()) {
                out.insert(to.as_str());
            }
        }
    }
    adj
}

fn find_cycle(adj: &BTreeMap<&str, BTreeSet<&str>>) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Fresh,
        Open,
        Done,
    }

    fn visit<'a>(
        node: &'a str,
        adj: &BTreeMap<&'a str, BTreeSet<&'a str>>,
        marks: &mut BTreeMap<&'a str, Mark>,
        stack: &mut Vec<&'a str>,
    ) -> Option<Vec<String>> {
        marks.insert(node, Mark::Open);
        stack.push(node);
        for &next in &adj[node] {
            match marks[next] {
                Mark::Open => {
                    let start = stack.iter().position(|&n| n == next).expect("open node on stack");
                    let mut path: Vec<String> = stack[start..].iter().map(|s| s.to_string()).collect();
                    path.push(next.to_string());
                    return Some(path);
                }
                Mark::Fresh => {
                    if let Some(path) = visit(next, adj, marks, stack) {
                        return Some(path);
                    }
                }
                Mark::Done => {}
            }
        }
        stack.pop();
        marks.insert(node, Mark::Done);
        None
    }

    let mut marks: BTreeMap<&str, Mark> = adj.keys().map(|&k| (k, Mark::Fresh)).collect();
    let mut stack = Vec::new();
    for &node in adj.keys() {
        if marks[node] == Mark::Fresh {
            if let Some(path) = visit(node, adj, &mut marks, &mut stack) {
                return Some(path);
            }
        }
    }
    None
}

/// Structural validation of a task's sub-goal graph. Violations are returned
/// as data; an empty report means the graph is a well-formed DAG.
pub fn validate_dag(spec: &TaskSpec) -> ValidationReport {
    let mut violations = Vec::new();
    if spec.nodes.is_empty() {
        violations.push(Violation::NoNodes);
    }
    if spec.max_steps == 0 {
        violations.push(Violation::ZeroMaxSteps);
    }
    let mut seen = BTreeSet::new();
    for node in &spec.nodes {
        if !seen.insert(node.id.as_str()) {
            violations.push(Violation::DuplicateId { id: node.id.clone() });
        }
    }
    for (from, to) in &spec.edges {
        for end in [from, to] {
            if !seen.contains(end.as_str()) {
                violations.push(Violation::DanglingEdge {
                    from: from.clone(),
                    to: to.clone(),
                    missing: end.clone(),
                });
            }
        }
    }
    if let Some(path) = find_cycle(&adjacency(spec)) {
        violations.push(Violation::Cycle { path });
    }
    ValidationReport { violations }
}

/// Kahn's algorithm with the smallest available id always taken first.
pub fn topo_order(spec: &TaskSpec) -> Result<Vec<String>, GraphError> {
    let adj = adjacency(spec);
    let mut indegree: BTreeMap<&str, usize> = adj.keys().map(|&k| (k, 0)).collect();
    for targets in adj.values() {
        for t in targets {
            *indegree.get_mut(t).expect("target is a node") += 1;
        }
    }
    let mut ready: BinaryHeap<Reverse<&str>> = indegree
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&n, _)| Reverse(n))
        .collect();
    let mut order = Vec::with_capacity(adj.len());
    while let Some(Reverse(node)) = ready.pop() {
        order.push(node.to_string());
        for &next in &adj[node] {
            let d = indegree.get_mut(next).expect("target is a node");
            *d -= 1;
            if *d == 0 {
                ready.push(Reverse(next));
            }
        }
    }
    if order.len() != adj.len() {
        return Err(GraphError::Cyclic);
    }
    Ok(order)
}

/// A validated task with precomputed predecessor sets and topological order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskGraph {
    spec: TaskSpec,
    order: Vec<String>,
    preds: BTreeMap<String, BTreeSet<String>>,
}

impl TaskGraph {
    pub fn new(spec: TaskSpec) -> Result<Self, GraphError> {
        let report = validate_dag(&spec);
        if !report.is_ok() {
            return Err(GraphError::Invalid(report));
        }
        let order = topo_order(&spec)?;
        let mut preds: BTreeMap<String, BTreeSet<String>> =
            spec.nodes.iter().map(|n| (n.id.clone(), BTreeSet::new())).collect();
        for (from, to) in &spec.edges {
            preds.get_mut(to).expect("validated").insert(from.clone());
        }
        Ok(Self { spec, order, preds })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn topo_order(&self) -> &[String] {
        &self.order
    }

    pub fn contains(&self, id: &str) -> bool {
        self.preds.contains_key(id)
    }

    pub fn predecessors(&self, id: &str) -> Option<&BTreeSet<String>> {
        self.preds.get(id)
    }

    pub fn len(&self) -> usize {
        self.spec.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spec.nodes.is_empty()
    }
}

/// Which sub-goals are done, and at which step each one completed.
///
/// Updates are copy-on-write: [`CompletionState::mark_complete`] returns a new
/// state and leaves `self` untouched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionState {
    graph: Arc<TaskGraph>,
    completed: BTreeSet<String>,
    order: Vec<(String, usize)>,
}

impl CompletionState {
    pub fn new(graph: Arc<TaskGraph>) -> Self {
        Self {
            graph,
            completed: BTreeSet::new(),
            order: Vec::new(),
        }
    }

    pub fn graph(&self) -> &Arc<TaskGraph> {
        &self.graph
    }

    pub fn completed(&self) -> &BTreeSet<String> {
        &self.completed
    }

    pub fn completion_order(&self) -> &[(String, usize)] {
        &self.order
    }

    pub fn is_complete(&self, id: &str) -> bool {
        self.completed.contains(id)
    }

    /// Incomplete nodes whose predecessors are all complete.
    pub fn frontier(&self) -> BTreeSet<String> {
        self.graph
            .preds
            .iter()
            .filter(|(id, preds)| {
                !self.completed.contains(*id) && preds.iter().all(|p| self.completed.contains(p))
            })
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Marking an already-complete node is a no-op.
    pub fn mark_complete(&self, node: &str, step: usize) -> Result<Self, GraphError> {
        let preds = self
            .graph
            .predecessors(node)
            .ok_or_else(|| GraphError::UnknownNode(node.to_string()))?;
        if self.completed.contains(node) {
            return Ok(self.clone());
        }
        let missing: Vec<String> = preds
            .iter()
            .filter(|p| !self.completed.contains(*p))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(GraphError::PredecessorIncomplete {
                node: node.to_string(),
                missing,
            });
        }
        if let Some(&(_, last)) = self.order.last() {
            if step < last {
                return Err(GraphError::StepRegression { step, last });
            }
        }
        let mut next = self.clone();
        next.completed.insert(node.to_string());
        next.order.push((node.to_string(), step));
        Ok(next)
    }

    /// Completed nodes over all nodes.
    pub fn completion_ratio(&self) -> f64 {
        if self.graph.is_empty() {
            return 0.0;
        }
        self.completed.len() as f64 / self.graph.len() as f64
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn node(id: &str) -> SubGoalNode {
        SubGoalNode {
            id: id.to_string(),
            description: format!("reach {id}"),
            key_step: true,
            checker: CheckerSpec::new("on_page", [("app", "app"), ("page", id)]),
        }
    }

    pub fn spec(ids: &[&str], edges: &[(&str, &str)]) -> TaskSpec {
        TaskSpec {
            schema: schema::TASK.to_string(),
            task_id: "t".to_string(),
            instruction: "do it".to_string(),
            nodes: ids.iter().map(|id| node(id)).collect(),
            edges: edges
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            platforms: vec![Platform::Mobile],
            max_steps: DEFAULT_MAX_STEPS,
        }
    }

    pub fn chain() -> TaskSpec {
        spec(
            &["open", "enter", "view", "switch", "add"],
            &[("open", "enter"), ("enter", "view"), ("view", "switch"), ("switch", "add")],
        )
    }

    pub fn diamond() -> TaskSpec {
        spec(&["a", "b", "c", "d"], &[("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")])
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    fn state(spec: TaskSpec) -> CompletionState {
        CompletionState::new(Arc::new(TaskGraph::new(spec).unwrap()))
    }

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn validate_accepts_chain_and_singleton() {
        assert!(validate_dag(&chain()).is_ok());
        assert!(validate_dag(&spec(&["n"], &[])).is_ok());
    }

    #[test]
    fn validate_reports_two_cycle() {
        let report = validate_dag(&spec(&["a", "b"], &[("a", "b"), ("b", "a")]));
        assert_eq!(
            report.violations,
            vec![Violation::Cycle {
                path: vec!["a".into(), "b".into(), "a".into()]
            }]
        );
    }

    #[test]
    fn validate_reports_dangling_and_duplicates() {
        let mut s = spec(&["a", "a"], &[("a", "z")]);
        s.max_steps = 0;
        let report = validate_dag(&s);
        assert!(report.violations.contains(&Violation::ZeroMaxSteps));
        assert!(report.violations.contains(&Violation::DuplicateId { id: "a".into() }));
        assert!(report.violations.contains(&Violation::DanglingEdge {
            from: "a".into(),
            to: "z".into(),
            missing: "z".into()
        }));
        assert_eq!(
            validate_dag(&spec(&[], &[])).violations,
            vec![Violation::NoNodes]
        );
    }

    #[test]
    fn topo_order_examples() {
        assert_eq!(
            topo_order(&chain()).unwrap(),
            vec!["open", "enter", "view", "switch", "add"]
        );
        assert_eq!(topo_order(&diamond()).unwrap(), vec!["a", "b", "c", "d"]);
        assert_eq!(topo_order(&spec(&["n"], &[])).unwrap(), vec!["n"]);
        assert!(matches!(
            topo_order(&spec(&["a", "b"], &[("a", "b"), ("b", "a")])),
            Err(GraphError::Cyclic)
        ));
    }

    #[test]
    fn frontier_examples() {
        let s = state(chain());
        assert_eq!(s.frontier(), set(&["open"]));
        let s = s.mark_complete("open", 1).unwrap().mark_complete("enter", 2).unwrap();
        assert_eq!(s.frontier(), set(&["view"]));
        let d = state(diamond()).mark_complete("a", 1).unwrap();
        assert_eq!(d.frontier(), set(&["b", "c"]));
    }

    #[test]
    fn mark_complete_examples() {
        let s = state(chain());
        let s1 = s.mark_complete("open", 2).unwrap();
        assert_eq!(s1.completed(), &set(&["open"]));
        assert!(s.completed().is_empty(), "original untouched");
        assert!(matches!(
            s.mark_complete("view", 1),
            Err(GraphError::PredecessorIncomplete { .. })
        ));
        assert!(matches!(s.mark_complete("nope", 1), Err(GraphError::UnknownNode(_))));
        assert_eq!(s1.mark_complete("open", 5).unwrap(), s1);

        let d = ["a", "b", "c"]
            .iter()
            .enumerate()
            .fold(state(diamond()), |st, (i, id)| st.mark_complete(id, i + 1).unwrap());
        let d = d.mark_complete("d", 9).unwrap();
        assert_eq!(d.completed(), &set(&["a", "b", "c", "d"]));
        assert_eq!(d.completion_order().last(), Some(&("d".to_string(), 9)));
    }

    #[test]
    fn mark_complete_rejects_step_regression() {
        let s = state(chain()).mark_complete("open", 4).unwrap();
        assert!(matches!(
            s.mark_complete("enter", 3),
            Err(GraphError::StepRegression { step: 3, last: 4 })
        ));
    }

    #[test]
    fn completion_ratio_examples() {
        let s = state(chain());
        assert_eq!(s.completion_ratio(), 0.0);
        let three = ["open", "enter", "view"]
            .iter()
            .fold(s.clone(), |st, id| st.mark_complete(id, 1).unwrap());
        assert_eq!(three.completion_ratio(), 0.6);
        let all = ["switch", "add"]
            .iter()
            .fold(three, |st, id| st.mark_complete(id, 2).unwrap());
        assert_eq!(all.completion_ratio(), 1.0);
    }

    #[test]
    fn task_json_round_trip_and_default_budget() {
        let text = r#"{
            "schema": "kgce-task/1",
            "task_id": "x",
            "instruction": "go",
            "nodes": [{"id": "a", "description": "d", "checker": {"predicate": "app_opened", "params": {"app": "Tasks"}}}],
            "platforms": ["mobile"]
        }"#;
        let spec = TaskSpec::from_json(text).unwrap();
        assert_eq!(spec.max_steps, DEFAULT_MAX_STEPS);
        assert!(!spec.nodes[0].key_step);
        assert_eq!(TaskSpec::from_json(&spec.to_json()).unwrap(), spec);
    }

    #[test]
    fn task_load_rejects_bad_checker_and_schema() {
        let mut spec = chain();
        spec.nodes[2].checker = CheckerSpec::new("teleport", []);
        assert!(matches!(
            TaskSpec::from_json(&spec.to_json()),
            Err(TaskLoadError::Checker { .. })
        ));
        let mut spec = chain();
        spec.schema = "kgce-task/0".into();
        assert!(matches!(
            TaskSpec::from_json(&spec.to_json()),
            Err(TaskLoadError::Schema(_))
        ));
    }
}
