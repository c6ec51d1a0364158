//! Template instantiation and multi-part task composition.
//!
//! Placeholders are written `{name}` with `name` in `[a-z_]+`; `{{` and `}}`
//! stand for literal braces. A template's sub-goals always form a chain;
//! richer DAG shapes come from [`compose`].

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checker::CheckerSpec;
use crate::platform::Platform;
use crate::schema;
use crate::task_graph::{validate_dag, SubGoalNode, TaskLoadError, TaskSpec, Violation, DEFAULT_MAX_STEPS};

/// Separator placed between the instructions of composed parts.
pub const INSTRUCTION_JOINER: &str = "; then ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubGoalPattern {
    pub id: String,
    pub description: String,
    #[serde(default)]
    pub key_step: bool,
    /// Parameter values may contain placeholders.
    pub checker: CheckerSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub schema: String,
    pub template_id: String,
    pub pattern: String,
    pub subgoals: Vec<SubGoalPattern>,
    pub placeholders: BTreeSet<String>,
    pub platform: Platform,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BindingSet(pub BTreeMap<String, String>);

impl BindingSet {
    pub fn new<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        Self(
            pairs
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        )
    }
}

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("malformed pattern `{text}` at byte {position}: {reason}")]
    MalformedPattern {
        text: String,
        position: usize,
        reason: &'static str,
    },
    #[error("placeholder `{0}` is used but not declared by the template")]
    UndeclaredPlaceholder(String),
    #[error("template `{0}` has no sub-goals")]
    NoSubGoals(String),
    #[error("missing binding for placeholder `{0}`")]
    MissingBinding(String),
    #[error("binding `{0}` is not a placeholder of the template")]
    UnknownPlaceholder(String),
    #[error("binding `{0}` is empty")]
    EmptyBinding(String),
    #[error("nothing to compose")]
    EmptyComposition,
    #[error("bridge references part {part} node `{node}`, which does not exist")]
    BadBridgeReference { part: usize, node: String },
    #[error("composition introduces a cycle: {}", .0.join(" -> "))]
    CycleIntroduced(Vec<String>),
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error(transparent)]
    Invalid(#[from] TaskLoadError),
    #[error(transparent)]
    Schema(#[from] schema::SchemaMismatch),
    #[error("malformed document: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(String),
}

fn parse_pattern(text: &str) -> Result<Vec<Segment>, SynthesisError> {
    let malformed = |position, reason| SynthesisError::MalformedPattern {
        text: text.to_string(),
        position,
        reason,
    };
    let bytes = text.as_bytes();
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                literal.push('{');
                i += 2;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                literal.push('}');
                i += 2;
            }
            b'{' => {
                let close = text[i + 1..]
                    .find('}')
                    .map(|off| i + 1 + off)
                    .ok_or_else(|| malformed(i, "unclosed placeholder"))?;
                let name = &text[i + 1..close];
                if name.is_empty() || !name.bytes().all(|b| b.is_ascii_lowercase() || b == b'_') {
                    return Err(malformed(i, "placeholder names must match [a-z_]+"));
                }
                if !literal.is_empty() {
                    segments.push(Segment::Text(std::mem::take(&mut literal)));
                }
                segments.push(Segment::Slot(name.to_string()));
                i = close + 1;
            }
            b'}' => return Err(malformed(i, "unmatched `}`")),
            _ => {
                let ch = text[i..].chars().next().expect("in bounds");
                literal.push(ch);
                i += ch.len_utf8();
            }
        }
    }
    if !literal.is_empty() {
        segments.push(Segment::Text(literal));
    }
    Ok(segments)
}

/// Placeholder names used in `text`, in order of first appearance.
pub fn placeholders_in(text: &str) -> Result<Vec<String>, SynthesisError> {
    let mut names = Vec::new();
    for seg in parse_pattern(text)? {
        if let Segment::Slot(name) = seg {
            if !names.contains(&name) {
                names.push(name);
            }
        }
    }
    Ok(names)
}

fn substitute(text: &str, bindings: &BindingSet) -> Result<String, SynthesisError> {
    let mut out = String::with_capacity(text.len());
    for seg in parse_pattern(text)? {
        match seg {
            Segment::Text(t) => out.push_str(&t),
            Segment::Slot(name) => out.push_str(
                bindings
                    .0
                    .get(&name)
                    .ok_or(SynthesisError::MissingBinding(name.clone()))?,
            ),
        }
    }
    Ok(out)
}

impl TaskTemplate {
    pub fn from_reader(reader: impl Read) -> Result<Self, SynthesisError> {
        let template: TaskTemplate = serde_json::from_reader(reader)?;
        template.check()?;
        Ok(template)
    }

    fn texts(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.pattern.as_str()).chain(self.subgoals.iter().flat_map(|sg| {
            [sg.id.as_str(), sg.description.as_str()]
                .into_iter()
                .chain(sg.checker.params.values().map(String::as_str))
        }))
    }

    pub fn check(&self) -> Result<(), SynthesisError> {
        schema::expect(schema::TEMPLATE, &self.schema)?;
        if self.subgoals.is_empty() {
            return Err(SynthesisError::NoSubGoals(self.template_id.clone()));
        }
        for text in self.texts() {
            for name in placeholders_in(text)? {
                if !self.placeholders.contains(&name) {
                    return Err(SynthesisError::UndeclaredPlaceholder(name));
                }
            }
        }
        Ok(())
    }
}

/// Substitutes `bindings` into every pattern of `template` and wires the
/// sub-goals as a chain.
pub fn instantiate(
    template: &TaskTemplate,
    bindings: &BindingSet,
    task_id: &str,
) -> Result<TaskSpec, SynthesisError> {
    template.check()?;
    if let Some(missing) = template
        .placeholders
        .iter()
        .find(|p| !bindings.0.contains_key(*p))
    {
        return Err(SynthesisError::MissingBinding(missing.clone()));
    }
    if let Some(unknown) = bindings.0.keys().find(|k| !template.placeholders.contains(*k)) {
        return Err(SynthesisError::UnknownPlaceholder(unknown.clone()));
    }
    if let Some((name, _)) = bindings.0.iter().find(|(_, v)| v.is_empty()) {
        return Err(SynthesisError::EmptyBinding(name.clone()));
    }

    let mut nodes = Vec::with_capacity(template.subgoals.len());
    for sg in &template.subgoals {
        let params = sg
            .checker
            .params
            .iter()
            .map(|(k, v)| Ok((k.clone(), substitute(v, bindings)?)))
            .collect::<Result<BTreeMap<_, _>, SynthesisError>>()?;
        nodes.push(SubGoalNode {
            id: substitute(&sg.id, bindings)?,
            description: substitute(&sg.description, bindings)?,
            key_step: sg.key_step,
            checker: CheckerSpec {
                predicate: sg.checker.predicate.clone(),
                params,
            },
        });
    }
    let edges = nodes
        .windows(2)
        .map(|w| (w[0].id.clone(), w[1].id.clone()))
        .collect();
    let spec = TaskSpec {
        schema: schema::TASK.to_string(),
        task_id: task_id.to_string(),
        instruction: substitute(&template.pattern, bindings)?,
        nodes,
        edges,
        platforms: vec![template.platform],
        max_steps: template.max_steps.unwrap_or(DEFAULT_MAX_STEPS),
    };
    spec.check()?;
    Ok(spec)
}

/// Reference to a node inside one part of a composition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartNode(pub usize, pub String);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bridge {
    pub from: PartNode,
    pub to: PartNode,
}

/// Id of `node` from part `part` inside a composed task.
pub fn namespaced(part: usize, node: &str) -> String {
    format!("p{part}.{node}")
}

/// Joins parts into one task. Without explicit bridges every sink of part
/// `i` is wired to every source of part `i + 1`.
pub fn compose(parts: &[TaskSpec], bridges: &[Bridge], task_id: &str) -> Result<TaskSpec, SynthesisError> {
    if parts.is_empty() {
        return Err(SynthesisError::EmptyComposition);
    }
    for bridge in bridges {
        for PartNode(part, node) in [&bridge.from, &bridge.to] {
            if parts.get(*part).and_then(|p| p.node(node)).is_none() {
                return Err(SynthesisError::BadBridgeReference {
                    part: *part,
                    node: node.clone(),
                });
            }
        }
    }

    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let mut platforms: Vec<Platform> = Vec::new();
    for (i, part) in parts.iter().enumerate() {
        nodes.extend(part.nodes.iter().map(|n| SubGoalNode {
            id: namespaced(i, &n.id),
            ..n.clone()
        }));
        edges.extend(
            part.edges
                .iter()
                .map(|(a, b)| (namespaced(i, a), namespaced(i, b))),
        );
        for p in &part.platforms {
            if !platforms.contains(p) {
                platforms.push(*p);
            }
        }
    }
    if bridges.is_empty() {
        for (i, pair) in parts.windows(2).enumerate() {
            for sink in pair[0].sinks() {
                for source in pair[1].sources() {
                    edges.push((namespaced(i, &sink), namespaced(i + 1, &source)));
                }
            }
        }
    } else {
        edges.extend(bridges.iter().map(|b| {
            (
                namespaced(b.from.0, &b.from.1),
                namespaced(b.to.0, &b.to.1),
            )
        }));
    }

    let spec = TaskSpec {
        schema: schema::TASK.to_string(),
        task_id: task_id.to_string(),
        instruction: parts
            .iter()
            .map(|p| p.instruction.as_str())
            .collect::<Vec<_>>()
            .join(INSTRUCTION_JOINER),
        nodes,
        edges,
        platforms,
        max_steps: parts.iter().map(|p| p.max_steps).sum(),
    };
    if let Some(Violation::Cycle { path }) = validate_dag(&spec)
        .violations
        .into_iter()
        .find(|v| matches!(v, Violation::Cycle { .. }))
    {
        return Err(SynthesisError::CycleIntroduced(path));
    }
    spec.check()?;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartRequest {
    pub template: String,
    #[serde(default)]
    pub bindings: BindingSet,
}

/// One entry of a bindings file: either a single instantiation or a
/// composition of several.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskRequest {
    Single {
        task_id: String,
        template: String,
        #[serde(default)]
        bindings: BindingSet,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_steps: Option<usize>,
    },
    Composite {
        task_id: String,
        compose: Vec<PartRequest>,
        #[serde(default)]
        bridges: Vec<Bridge>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_steps: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindingsFile {
    pub schema: String,
    pub tasks: Vec<TaskRequest>,
}

impl BindingsFile {
    pub fn from_reader(reader: impl Read) -> Result<Self, SynthesisError> {
        let file: BindingsFile = serde_json::from_reader(reader)?;
        schema::expect(schema::BINDINGS, &file.schema)?;
        Ok(file)
    }
}

/// Runs every request of a bindings file against a template library.
pub fn synthesize(
    templates: &BTreeMap<String, TaskTemplate>,
    file: &BindingsFile,
) -> Result<Vec<TaskSpec>, SynthesisError> {
    let lookup = |id: &str| {
        templates
            .get(id)
            .ok_or_else(|| SynthesisError::UnknownTemplate(id.to_string()))
    };
    file.tasks
        .iter()
        .map(|req| {
            let (mut spec, max_steps) = match req {
                TaskRequest::Single {
                    task_id,
                    template,
                    bindings,
                    max_steps,
                } => (instantiate(lookup(template)?, bindings, task_id)?, *max_steps),
                TaskRequest::Composite {
                    task_id,
                    compose: parts,
                    bridges,
                    max_steps,
                } => {
                    let parts = parts
                        .iter()
                        .enumerate()
                        .map(|(i, p)| instantiate(lookup(&p.template)?, &p.bindings, &format!("{task_id}#{i}")))
                        .collect::<Result<Vec<_>, _>>()?;
                    (compose(&parts, bridges, task_id)?, *max_steps)
                }
            };
            if let Some(max) = max_steps {
                spec.max_steps = max;
                spec.check()?;
            }
            Ok(spec)
        })
        .collect()
}
