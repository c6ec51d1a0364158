//! Agents: scripted replays and model-backed agents.

pub mod grammar;
pub mod mock;
pub mod model;
pub mod prompt;

use thiserror::Error;

use crate::env::Action;
pub use grammar::{parse_action, ParseFailure, ParsedAction};
pub use model::{ModelAgent, ModelEndpointConfig, TransportError};
pub use prompt::{build_prompt, AgentTurnInput, HistoryEntry};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("script exhausted")]
    ScriptExhausted,
    #[error("unparseable reply ({failure})")]
    Parse { raw: String, failure: ParseFailure },
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// One decision per turn. Each instance serves a single episode.
pub trait Agent: Send {
    fn next_action(&mut self, input: &AgentTurnInput) -> Result<Action, AgentError>;

    fn kind(&self) -> &'static str;
}

pub fn scripted_next(script: &[Action], turn_index: usize) -> Result<Action, AgentError> {
    script.get(turn_index).cloned().ok_or(AgentError::ScriptExhausted)
}

/// Replays a fixed action list, ignoring observations.
#[derive(Debug, Clone)]
pub struct ScriptedAgent {
    script: Vec<Action>,
    turn: usize,
}

impl ScriptedAgent {
    pub fn new(script: Vec<Action>) -> Self {
        Self { script, turn: 0 }
    }
}

impl Agent for ScriptedAgent {
    fn next_action(&mut self, _input: &AgentTurnInput) -> Result<Action, AgentError> {
        let action = scripted_next(&self.script, self.turn)?;
        self.turn += 1;
        Ok(action)
    }

    fn kind(&self) -> &'static str {
        "scripted"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_next_indexes_and_exhausts() {
        let script = vec![
            Action::OpenApp("Xiaoya".into()),
            Action::Tap("course_bd".into()),
            Action::Done,
        ];
        assert_eq!(scripted_next(&script, 1).unwrap(), Action::Tap("course_bd".into()));
        assert!(matches!(scripted_next(&script, 3), Err(AgentError::ScriptExhausted)));
    }
}
