//! Uniform text-generation interface over a chat-completions HTTP service and
//! a deterministic scripted mock, with stop-sequence support for tool-call
//! turn-taking.

mod http;
mod mock;

pub use http::HttpLlmBackend;
pub use mock::{MockBackend, ScriptRule};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport failure after {attempts} attempt(s): {reason}")]
    Transport { attempts: u32, reason: String },
    #[error("malformed service response: {0}")]
    Protocol(String),
    #[error("request timed out")]
    Timeout,
    #[error("backend cannot resume a partial assistant message")]
    UnsupportedByBackend,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

/// An ordered chat transcript: optional system text, then strictly
/// alternating user/assistant turns starting with user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub system: Option<String>,
    turns: Vec<(Role, String)>,
}

impl Conversation {
    pub fn new(system: Option<String>, turns: Vec<(Role, String)>) -> Result<Self, LlmError> {
        let conv = Self { system, turns };
        conv.check_alternation()?;
        Ok(conv)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            system: None,
            turns: vec![(Role::User, content.into())],
        }
    }

    fn check_alternation(&self) -> Result<(), LlmError> {
        for (i, (role, _)) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if *role != expected {
                return Err(LlmError::InvalidInput(format!(
                    "turn {i} has role {role:?}, expected {expected:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn turns(&self) -> &[(Role, String)] {
        &self.turns
    }

    /// Append a turn, enforcing alternation.
    pub fn push(&mut self, role: Role, content: impl Into<String>) -> Result<(), LlmError> {
        self.turns.push((role, content.into()));
        let res = self.check_alternation();
        if res.is_err() {
            self.turns.pop();
        }
        res
    }

    /// Canonical plain-text rendering used by the mock for rule matching and
    /// by trace records.
    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(system) = &self.system {
            out.push_str("[system]\n");
            out.push_str(system);
            out.push('\n');
        }
        for (role, content) in &self.turns {
            out.push_str(match role {
                Role::User => "[user]\n",
                Role::Assistant => "[assistant]\n",
            });
            out.push_str(content);
            out.push('\n');
        }
        out
    }
}

pub const MAX_STOP_SEQUENCES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub stop_sequences: Vec<String>,
}

impl SamplingParams {
    pub fn new(
        temperature: f64,
        max_tokens: u32,
        stop_sequences: Vec<String>,
    ) -> Result<Self, LlmError> {
        if !(0.0..=2.0).contains(&temperature) {
            return Err(LlmError::InvalidInput(format!(
                "temperature {temperature} outside [0, 2]"
            )));
        }
        if max_tokens == 0 {
            return Err(LlmError::InvalidInput("max_tokens must be positive".into()));
        }
        if stop_sequences.len() > MAX_STOP_SEQUENCES {
            return Err(LlmError::InvalidInput(format!(
                "too many stop sequences ({})",
                stop_sequences.len()
            )));
        }
        if stop_sequences.iter().any(String::is_empty) {
            return Err(LlmError::InvalidInput("empty stop sequence".into()));
        }
        Ok(Self {
            temperature,
            max_tokens,
            stop_sequences,
        })
    }

    pub fn deterministic() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 1024,
            stop_sequences: Vec::new(),
        }
    }

    pub fn with_stops(mut self, stops: &[&str]) -> Self {
        self.stop_sequences = stops.iter().map(|s| s.to_string()).collect();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    StopSequence(usize),
    MaxTokens,
    EndOfMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub finish_reason: FinishReason,
}

/// Truncate `text` at the earliest occurrence of any stop sequence. Ties at
/// the same offset resolve to the lowest stop index.
pub fn apply_stop_sequences(text: &str, stops: &[String]) -> Completion {
    let mut best: Option<(usize, usize)> = None; // (byte offset, stop index)
    for (i, stop) in stops.iter().enumerate() {
        if let Some(pos) = text.find(stop.as_str()) {
            if best.is_none_or(|(p, _)| pos < p) {
                best = Some((pos, i));
            }
        }
    }
    match best {
        Some((pos, idx)) => Completion {
            text: text[..pos].to_string(),
            finish_reason: FinishReason::StopSequence(idx),
        },
        None => Completion {
            text: text.to_string(),
            finish_reason: FinishReason::EndOfMessage,
        },
    }
}

/// Text-generation backend shared by all agents.
pub trait LlmBackend: Send + Sync {
    fn generate(&self, conv: &Conversation, params: &SamplingParams)
        -> Result<Completion, LlmError>;

    /// Resume generation as if `partial_assistant` were the assistant's
    /// message so far; returns only newly generated content.
    fn continue_generation(
        &self,
        conv: &Conversation,
        partial_assistant: &str,
        params: &SamplingParams,
    ) -> Result<Completion, LlmError>;

    /// Cheap reachability probe used by the CLI preflight.
    fn preflight(&self) -> Result<(), LlmError>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alternation_enforced() {
        assert!(Conversation::new(
            None,
            vec![(Role::User, "a".into()), (Role::Assistant, "b".into())]
        )
        .is_ok());
        assert!(Conversation::new(None, vec![(Role::Assistant, "b".into())]).is_err());
        assert!(Conversation::new(
            None,
            vec![(Role::User, "a".into()), (Role::User, "b".into())]
        )
        .is_err());
    }

    #[test]
    fn sampling_params_bounds() {
        assert!(SamplingParams::new(2.1, 10, vec![]).is_err());
        assert!(SamplingParams::new(-0.1, 10, vec![]).is_err());
        assert!(SamplingParams::new(0.8, 0, vec![]).is_err());
        assert!(SamplingParams::new(0.0, 1, vec![String::new()]).is_err());
        assert!(SamplingParams::new(0.8, 256, vec!["->".into()]).is_ok());
    }

    #[test]
    fn stop_truncation_excludes_sequence() {
        let c = apply_stop_sequences("CLIP: A / B -> rest", &["->".to_string()]);
        assert_eq!(c.text, "CLIP: A / B ");
        assert_eq!(c.finish_reason, FinishReason::StopSequence(0));
    }

    #[test]
    fn no_stop_means_end_of_message() {
        let c = apply_stop_sequences("hello", &[]);
        assert_eq!(c.text, "hello");
        assert_eq!(c.finish_reason, FinishReason::EndOfMessage);
    }

    #[test]
    fn earliest_stop_wins() {
        let c = apply_stop_sequences("a STOP b HALT", &["HALT".into(), "STOP".into()]);
        assert_eq!(c.text, "a ");
        assert_eq!(c.finish_reason, FinishReason::StopSequence(1));
    }
}
