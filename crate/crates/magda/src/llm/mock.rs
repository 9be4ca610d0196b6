//! Deterministic scripted mock backend. Rules match against the rendered
//! conversation (including any partial assistant text); first match wins.

use std::fs;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{
    apply_stop_sequences, Completion, Conversation, LlmBackend, LlmError, SamplingParams,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(rename = "match")]
    pub pattern: String,
    #[serde(default)]
    pub regex: bool,
    pub reply: String,
}

impl ScriptRule {
    pub fn substring(pattern: impl Into<String>, reply: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            regex: false,
            reply: reply.into(),
        }
    }

    pub fn regex(pattern: impl Into<String>, reply: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            regex: true,
            reply: reply.into(),
        }
    }
}

enum Matcher {
    Substring(String),
    Regex(Regex),
}

pub struct MockBackend {
    rules: Vec<(Matcher, String)>,
    default_reply: String,
}

impl MockBackend {
    pub fn new(rules: Vec<ScriptRule>, default_reply: impl Into<String>) -> Result<Self, LlmError> {
        let compiled = rules
            .into_iter()
            .map(|r| {
                let matcher = if r.regex {
                    Matcher::Regex(
                        Regex::new(&r.pattern)
                            .map_err(|e| LlmError::InvalidInput(format!("bad rule regex: {e}")))?,
                    )
                } else {
                    Matcher::Substring(r.pattern)
                };
                Ok((matcher, r.reply))
            })
            .collect::<Result<Vec<_>, LlmError>>()?;
        Ok(Self {
            rules: compiled,
            default_reply: default_reply.into(),
        })
    }

    /// Load a script file: JSON `[{"match": ..., "regex": bool, "reply": ...}]`,
    /// optionally wrapped as `{"default_reply": ..., "rules": [...]}`.
    pub fn from_script_file(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| {
            LlmError::InvalidInput(format!("cannot read script {}: {e}", path.display()))
        })?;
        #[derive(Deserialize)]
        struct Wrapped {
            #[serde(default)]
            default_reply: String,
            rules: Vec<ScriptRule>,
        }
        if let Ok(w) = serde_json::from_slice::<Wrapped>(&bytes) {
            return Self::new(w.rules, w.default_reply);
        }
        let rules: Vec<ScriptRule> = serde_json::from_slice(&bytes)
            .map_err(|e| LlmError::InvalidInput(format!("bad script {}: {e}", path.display())))?;
        Self::new(rules, "")
    }

    fn reply_for(&self, rendered: &str) -> &str {
        for (matcher, reply) in &self.rules {
            let hit = match matcher {
                Matcher::Substring(s) => rendered.contains(s.as_str()),
                Matcher::Regex(re) => re.is_match(rendered),
            };
            if hit {
                return reply;
            }
        }
        &self.default_reply
    }
}

impl LlmBackend for MockBackend {
    fn generate(
        &self,
        conv: &Conversation,
        params: &SamplingParams,
    ) -> Result<Completion, LlmError> {
        let reply = self.reply_for(&conv.render());
        Ok(apply_stop_sequences(reply, &params.stop_sequences))
    }

    fn continue_generation(
        &self,
        conv: &Conversation,
        partial_assistant: &str,
        params: &SamplingParams,
    ) -> Result<Completion, LlmError> {
        if partial_assistant.is_empty() {
            return Err(LlmError::InvalidInput(
                "partial_assistant must be non-empty".into(),
            ));
        }
        let rendered = format!("{}[assistant]\n{partial_assistant}", conv.render());
        let reply = self.reply_for(&rendered);
        Ok(apply_stop_sequences(reply, &params.stop_sequences))
    }

    fn preflight(&self) -> Result<(), LlmError> {
        Ok(())
    }
}
