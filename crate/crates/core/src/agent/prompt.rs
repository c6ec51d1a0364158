//! Prompt assembly for model-backed agents.

use serde::{Deserialize, Serialize};

use crate::env::{Observation, StepFlags};

pub const KB_HEADING: &str = "## Knowledge Base";

/// Fixed system preamble: the action grammar and the rules of the loop.
pub const SYSTEM_PREAMBLE: &str = "\
You are a GUI agent operating simulated desktop and mobile devices to complete a task.
Each turn you see the current screen and must reply with exactly one action:
  tap(ELEMENT_ID)             tap the element with this id on the current screen
  tap_xy(X, Y)                tap integer screen coordinates
  type(\"TEXT\")                type into the focused text field
  open_app(\"APP NAME\")        launch an installed app on the active device
  switch_device(\"DEVICE_ID\")  move control to another device
  back()                      return to the previous page
  done()                      declare the task finished
String arguments are double-quoted; write \\\" for a quote and \\\\ for a backslash.
Every reply consumes one step, including replies that are not a valid action.
";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub action: String,
    pub outcome: String,
}

impl HistoryEntry {
    pub fn new(action: impl Into<String>, flags: &StepFlags) -> Self {
        Self {
            action: action.into(),
            outcome: summarize_flags(flags),
        }
    }
}

pub fn summarize_flags(flags: &StepFlags) -> String {
    let base = if flags.out_of_range {
        "out of range"
    } else if flags.invalid_target {
        "invalid target"
    } else if flags.effect_applied {
        "applied"
    } else {
        "no effect"
    };
    if flags.revisit {
        format!("{base}, revisited earlier state")
    } else {
        base.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentTurnInput {
    pub instruction: String,
    pub observation: Observation,
    /// Empty when no knowledge was injected.
    pub kb_fragment: String,
    pub history: Vec<HistoryEntry>,
    pub remaining_steps: usize,
}

/// Everything after the system preamble: knowledge, task, screen, history
/// and the reply instruction.
pub fn build_user_prompt(input: &AgentTurnInput) -> String {
    let mut out = String::new();
    if !input.kb_fragment.is_empty() {
        out.push_str(KB_HEADING);
        out.push('\n');
        out.push_str(&input.kb_fragment);
        if !input.kb_fragment.ends_with('\n') {
            out.push('\n');
        }
        out.push('\n');
    }
    out.push_str("## Task\n");
    out.push_str(&input.instruction);
    out.push_str("\n\n## Current Screen\n");
    out.push_str(&input.observation.to_string());
    out.push_str("\n## History\n");
    if input.history.is_empty() {
        out.push_str("(no actions yet)\n");
    }
    for (i, entry) in input.history.iter().enumerate() {
        out.push_str(&format!("{}. {} -> {}\n", i + 1, entry.action, entry.outcome));
    }
    out.push_str(&format!(
        "\n## Your Turn\nRemaining steps: {}. Reply with exactly one action.\n",
        input.remaining_steps
    ));
    out
}

/// Full prompt text: preamble followed by [`build_user_prompt`].
pub fn build_prompt(input: &AgentTurnInput) -> String {
    format!("{SYSTEM_PREAMBLE}\n{}", build_user_prompt(input))
}
