//! Chat-completions HTTP client with retries and exponential backoff.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    apply_stop_sequences, Completion, Conversation, FinishReason, LlmBackend, LlmError, Role,
    SamplingParams,
};

pub const TOKEN_ENV_VAR: &str = "MAGDA_LLM_TOKEN";
const MAX_ATTEMPTS: u32 = 3;
const BACKOFF_BASE_MS: u64 = 500;

pub struct HttpLlmBackend {
    client: reqwest::blocking::Client,
    base_url: String,
    model: String,
    token: Option<String>,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    stop: Vec<&'a str>,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

impl HttpLlmBackend {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("client construction"),
            base_url: base_url.into(),
            model: model.into(),
            token: std::env::var(TOKEN_ENV_VAR).ok(),
        }
    }

    fn messages<'a>(&self, conv: &'a Conversation) -> Vec<WireMessage<'a>> {
        let mut out = Vec::with_capacity(conv.turns().len() + 1);
        if let Some(system) = conv.system.as_deref() {
            out.push(WireMessage {
                role: "system",
                content: system,
            });
        }
        for (role, content) in conv.turns() {
            out.push(WireMessage {
                role: match role {
                    Role::User => "user",
                    Role::Assistant => "assistant",
                },
                content,
            });
        }
        out
    }

    fn request(
        &self,
        messages: Vec<WireMessage<'_>>,
        params: &SamplingParams,
    ) -> Result<Completion, LlmError> {
        let url = format!("{}/v1/chat/completions", self.base_url.trim_end_matches('/'));
        let body = ChatRequest {
            model: &self.model,
            messages,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            stop: params.stop_sequences.iter().map(String::as_str).collect(),
        };
        let mut last_err = String::new();
        for attempt in 0..MAX_ATTEMPTS {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(BACKOFF_BASE_MS << (attempt - 1)));
            }
            let mut req = self.client.post(&url).json(&body);
            if let Some(token) = &self.token {
                req = req.bearer_auth(token);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_server_error() {
                        last_err = format!("server error {status}");
                        continue;
                    }
                    if !status.is_success() {
                        // Client errors are not retryable.
                        return Err(LlmError::Protocol(format!(
                            "status {status}: {}",
                            resp.text().unwrap_or_default()
                        )));
                    }
                    let parsed: ChatResponse = resp
                        .json()
                        .map_err(|e| LlmError::Protocol(format!("bad response body: {e}")))?;
                    let choice = parsed
                        .choices
                        .into_iter()
                        .next()
                        .ok_or_else(|| LlmError::Protocol("empty choices".into()))?;
                    let text = choice.message.content.unwrap_or_default();
                    // Defensive client-side truncation: some services echo the
                    // stop sequence in the content.
                    let truncated = apply_stop_sequences(&text, &params.stop_sequences);
                    let finish_reason = match (truncated.finish_reason, choice.finish_reason) {
                        (FinishReason::StopSequence(i), _) => FinishReason::StopSequence(i),
                        (_, Some(r)) if r == "length" => FinishReason::MaxTokens,
                        (_, Some(r)) if r == "stop" && !params.stop_sequences.is_empty() => {
                            // Service truncated before the stop text reached us;
                            // which sequence fired is not reported.
                            FinishReason::StopSequence(0)
                        }
                        _ => FinishReason::EndOfMessage,
                    };
                    return Ok(Completion {
                        text: truncated.text,
                        finish_reason,
                    });
                }
                Err(e) if e.is_timeout() => return Err(LlmError::Timeout),
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(LlmError::Transport {
            attempts: MAX_ATTEMPTS,
            reason: last_err,
        })
    }
}

impl LlmBackend for HttpLlmBackend {
    fn generate(
        &self,
        conv: &Conversation,
        params: &SamplingParams,
    ) -> Result<Completion, LlmError> {
        self.request(self.messages(conv), params)
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
        // The plain chat-completions wire protocol cannot resume an assistant
        // prefix, so send the partial transcript as the latest assistant turn
        // plus a "Continue." user turn.
        let mut messages = self.messages(conv);
        messages.push(WireMessage {
            role: "assistant",
            content: partial_assistant,
        });
        messages.push(WireMessage {
            role: "user",
            content: "Continue.",
        });
        self.request(messages, params)
    }

    fn preflight(&self) -> Result<(), LlmError> {
        let conv = Conversation::user("Reply with the single word: pong");
        let params = SamplingParams::new(0.0, 8, vec![]).expect("valid params");
        self.generate(&conv, &params).map(|_| ())
    }
}
