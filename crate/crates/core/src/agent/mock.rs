//! Deterministic stand-in for a chat-completions endpoint.
//!
//! A plan file maps task ids to reply sequences. A reply is either literal
//! text or a knowledge lookup: the mock searches the prompt's knowledge
//! section for an element whose description mentions a phrase and taps it.
//! Without knowledge in the prompt it guesses the first element on screen,
//! which is how it behaves like a model that has never seen the app.

use std::io::Read;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::{ChatRequest, ChatTransport, TransportError};
use super::prompt::KB_HEADING;
use crate::schema;

fn done_reply() -> String {
    "done()".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockReply {
    Text(String),
    KbLookup { kb_lookup: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockPlan {
    pub task_id: String,
    pub replies: Vec<MockReply>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockPlanFile {
    pub schema: String,
    pub plans: Vec<MockPlan>,
    /// Sent once a plan runs out, and for tasks without a plan.
    #[serde(default = "done_reply")]
    pub default_reply: String,
}

#[derive(Debug, Error)]
pub enum MockError {
    #[error("malformed mock plan file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Schema(#[from] schema::SchemaMismatch),
}

impl MockPlanFile {
    pub fn from_reader(reader: impl Read) -> Result<Self, MockError> {
        let file: MockPlanFile = serde_json::from_reader(reader)?;
        schema::expect(schema::MOCK, &file.schema)?;
        Ok(file)
    }

    /// A fresh transport positioned at the first reply of `task_id`'s plan.
    pub fn transport_for(&self, task_id: &str) -> MockTransport {
        let replies = self
            .plans
            .iter()
            .find(|p| p.task_id == task_id)
            .map(|p| p.replies.clone())
            .unwrap_or_default();
        MockTransport {
            replies,
            default_reply: self.default_reply.clone(),
            turn: Mutex::new(0),
        }
    }
}

pub struct MockTransport {
    replies: Vec<MockReply>,
    default_reply: String,
    turn: Mutex<usize>,
}

fn section<'a>(prompt: &'a str, heading: &str) -> Option<&'a str> {
    let start = prompt.find(heading)? + heading.len();
    let rest = &prompt[start..];
    let end = rest.find("\n## ").unwrap_or(rest.len());
    Some(&rest[..end])
}

fn kb_lookup(prompt: &str, phrase: &str) -> Option<String> {
    let phrase = phrase.to_lowercase();
    section(prompt, KB_HEADING)?.lines().find_map(|line| {
        let body = line.trim_start().strip_prefix("- ")?;
        let (id, rest) = body.split_once(" @ ")?;
        let (_, description) = rest.split_once(": ")?;
        description.to_lowercase().contains(&phrase).then(|| format!("tap({id})"))
    })
}

fn first_on_screen(prompt: &str) -> Option<String> {
    let screen = section(prompt, "## Current Screen")?;
    let elements = &screen[screen.find("Elements:\n")? + "Elements:\n".len()..];
    let first = elements.lines().next()?.strip_prefix("- ")?;
    let id = first.split_whitespace().next()?;
    Some(format!("tap({id})"))
}

impl ChatTransport for MockTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let turn = {
            let mut guard = self.turn.lock().expect("mock turn lock");
            let t = *guard;
            *guard += 1;
            t
        };
        let prompt = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("");
        Ok(match self.replies.get(turn) {
            None => self.default_reply.clone(),
            Some(MockReply::Text(text)) => text.clone(),
            Some(MockReply::KbLookup { kb_lookup: phrase }) => match kb_lookup(prompt, phrase) {
                Some(action) => format!("The knowledge base lists it: {action}"),
                None => match first_on_screen(prompt) {
                    Some(action) => format!("Guessing from the screen: {action}"),
                    None => "back()".to_string(),
                },
            },
        })
    }
}
