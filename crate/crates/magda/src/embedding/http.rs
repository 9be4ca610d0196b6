//! Remote embedding service client: POST {base_url}/embed with
//! {"kind": "text"|"image", "payload": ...}.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{EmbeddingBackend, EmbeddingError, EmbeddingVector};

pub struct HttpEmbeddingBackend {
    client: reqwest::blocking::Client,
    base_url: String,
    dim: usize,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    kind: &'a str,
    payload: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f64>,
    dim: usize,
}

impl HttpEmbeddingBackend {
    pub fn new(base_url: impl Into<String>, dim: usize) -> Self {
        Self {
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
                .expect("client construction"),
            base_url: base_url.into(),
            dim,
        }
    }

    fn embed(&self, kind: &str, payload: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let url = format!("{}/embed", self.base_url.trim_end_matches('/'));
        let resp = self
            .client
            .post(&url)
            .json(&EmbedRequest { kind, payload })
            .send()
            .map_err(|e| EmbeddingError::Backend(e.to_string()))?;
        if resp.status() == reqwest::StatusCode::NOT_FOUND {
            return Err(EmbeddingError::NotFound(payload.to_string()));
        }
        if !resp.status().is_success() {
            return Err(EmbeddingError::Backend(format!(
                "status {}",
                resp.status()
            )));
        }
        let parsed: EmbedResponse = resp
            .json()
            .map_err(|e| EmbeddingError::Backend(format!("bad response body: {e}")))?;
        if parsed.embedding.len() != self.dim || parsed.dim != self.dim {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.dim,
                got: parsed.embedding.len(),
            });
        }
        EmbeddingVector::new(parsed.embedding)
    }
}

impl EmbeddingBackend for HttpEmbeddingBackend {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if text.is_empty() {
            return Err(EmbeddingError::InvalidInput("empty text".into()));
        }
        self.embed("text", text)
    }

    fn embed_image(&self, image_ref: &str) -> Result<EmbeddingVector, EmbeddingError> {
        self.embed("image", image_ref)
    }

    fn preflight(&self) -> Result<(), EmbeddingError> {
        self.embed_text("preflight probe").map(|_| ())
    }
}
