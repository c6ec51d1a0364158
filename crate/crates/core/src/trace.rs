//! Episode traces: the source of truth from which metrics are recomputed.
//!
//! A trace is JSON Lines: one `header` line, one `step` line per executed
//! step, and a closing `end` line. Everything the evaluator needs (flags,
//! back-action marks, completions) is stored, so re-evaluation never needs
//! the environment.

use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::StepFlags;
use crate::eval::{EpisodeRecord, StepRecord, TerminalCause};
use crate::schema;
use crate::task_graph::TaskGraph;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: String,
    pub task_id: String,
    pub agent: String,
    /// Knowledge packages injected into prompts (empty when none).
    pub kb_packages: Vec<String>,
    pub initial_signature: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    /// 1-based.
    pub index: usize,
    pub action: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_reply: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
    pub flags: StepFlags,
    pub is_back_action: bool,
    pub pre_signature: String,
    pub post_signature: String,
    pub observation_digest: String,
    /// Sub-goals completed by this step, in firing order.
    pub completed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEnd {
    pub terminal: TerminalCause,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TraceLine {
    Header(TraceHeader),
    Step(TraceStep),
    End(TraceEnd),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub header: TraceHeader,
    pub steps: Vec<TraceStep>,
    pub end: TraceEnd,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Schema(#[from] schema::SchemaMismatch),
    #[error("line {line}: {message}")]
    Structure { line: usize, message: String },
    #[error("trace is for task `{trace}` but task `{task}` was supplied")]
    TaskMismatch { trace: String, task: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Trace {
    pub fn write_jsonl(&self, mut sink: impl Write) -> std::io::Result<()> {
        let mut line = |l: &TraceLine| -> std::io::Result<()> {
            serde_json::to_writer(&mut sink, l)?;
            sink.write_all(b"\n")
        };
        line(&TraceLine::Header(self.header.clone()))?;
        for s in &self.steps {
            line(&TraceLine::Step(s.clone()))?;
        }
        line(&TraceLine::End(self.end.clone()))
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl(source: impl BufRead) -> Result<Self, TraceError> {
        let mut header = None;
        let mut steps: Vec<TraceStep> = Vec::new();
        let mut end = None;
        let mut last = 0;
        for (i, raw) in source.lines().enumerate() {
            let line = i + 1;
            last = line;
            let raw = raw?;
            if raw.trim().is_empty() {
                continue;
            }
            let structure = |message: &str| TraceError::Structure {
                line,
                message: message.to_string(),
            };
            if end.is_some() {
                return Err(structure("content after the end line"));
            }
            match serde_json::from_str(&raw).map_err(|source| TraceError::Parse { line, source })? {
                TraceLine::Header(h) => {
                    if header.is_some() {
                        return Err(structure("duplicate header"));
                    }
                    schema::expect(schema::TRACE, &h.schema)?;
                    header = Some(h);
                }
                TraceLine::Step(s) => {
                    if header.is_none() {
                        return Err(structure("step before header"));
                    }
                    if s.index != steps.len() + 1 {
                        return Err(structure("step indices must run 1, 2, 3, ..."));
                    }
                    steps.push(s);
                }
                TraceLine::End(e) => {
                    if header.is_none() {
                        return Err(structure("end before header"));
                    }
                    if e.steps != steps.len() {
                        return Err(structure("end line step count disagrees with the step lines"));
                    }
                    end = Some(e);
                }
            }
        }
        let missing = |what: &str| TraceError::Structure {
            line: last,
            message: format!("missing {what} line"),
        };
        Ok(Trace {
            header: header.ok_or_else(|| missing("header"))?,
            steps,
            end: end.ok_or_else(|| missing("end"))?,
        })
    }

    /// Rebuilds the evaluator's view of the episode.
    pub fn to_episode(&self, task: Arc<TaskGraph>) -> Result<EpisodeRecord, TraceError> {
        if task.spec().task_id != self.header.task_id {
            return Err(TraceError::TaskMismatch {
                trace: self.header.task_id.clone(),
                task: task.spec().task_id.clone(),
            });
        }
        let steps = self
            .steps
            .iter()
            .map(|s| StepRecord {
                action: s.action.clone(),
                flags: s.flags,
                is_back_action: s.is_back_action,
            })
            .collect();
        let completion_order = self
            .steps
            .iter()
            .flat_map(|s| s.completed.iter().map(move |id| (id.clone(), s.index)))
            .collect();
        Ok(EpisodeRecord {
            task,
            steps,
            completion_order,
            terminal: self.end.terminal,
        })
    }
}
