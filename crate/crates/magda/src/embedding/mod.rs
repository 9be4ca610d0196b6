//! Probe scoring against an image: embeddings, cosine similarity, pairwise
//! softmax, and the psi decision rule.

mod cache;
mod http;
mod synthetic;

pub use cache::CachedBackend;
pub use http::HttpEmbeddingBackend;
pub use synthetic::{SyntheticImage, SyntheticWorld, SYNTHETIC_ORACLE_PSI};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("embedding backend error: {0}")]
    Backend(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("image not found: {0}")]
    NotFound(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.len() < 2 {
            return Err(EmbeddingError::InvalidInput(format!(
                "dimension {} < 2",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::InvalidInput("non-finite entry".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

/// A contrastive positive/negative description pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FindingProbe {
    positive: String,
    negative: String,
}

impl FindingProbe {
    pub fn new(
        positive: impl Into<String>,
        negative: impl Into<String>,
    ) -> Result<Self, EmbeddingError> {
        let positive = positive.into();
        let negative = negative.into();
        if positive.is_empty() || negative.is_empty() {
            return Err(EmbeddingError::InvalidInput(
                "probe descriptions must be non-empty".into(),
            ));
        }
        if positive == negative {
            return Err(EmbeddingError::InvalidInput(
                "positive and negative descriptions must differ".into(),
            ));
        }
        Ok(Self { positive, negative })
    }

    pub fn positive(&self) -> &str {
        &self.positive
    }

    pub fn negative(&self) -> &str {
        &self.negative
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegationScoring {
    /// Softmax over positive and negative similarities.
    Contrastive,
    /// Positive similarity alone, mapped affinely into [0, 1].
    PositiveOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VlmConfig {
    pub psi: f64,
    pub negation_mode: NegationScoring,
}

impl VlmConfig {
    pub fn new(psi: f64, negation_mode: NegationScoring) -> Result<Self, EmbeddingError> {
        if !(psi > 0.0 && psi < 1.0) {
            return Err(EmbeddingError::InvalidInput(format!(
                "psi {psi} outside (0, 1)"
            )));
        }
        Ok(Self { psi, negation_mode })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Positive,
    Negative,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Verdict::Positive => write!(f, "Positive"),
            Verdict::Negative => write!(f, "Negative"),
        }
    }
}

/// A scored probe: the probability that the positive description matches the
/// image, and the resulting verdict under psi.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindingObservation {
    pub probe: FindingProbe,
    pub p_positive: f64,
    pub verdict: Verdict,
    pub s_pos: f64,
    pub s_neg: Option<f64>,
}

pub trait EmbeddingBackend: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError>;
    fn embed_image(&self, image_ref: &str) -> Result<EmbeddingVector, EmbeddingError>;

    fn preflight(&self) -> Result<(), EmbeddingError> {
        Ok(())
    }
}

/// Cosine similarity, clamped into [-1, 1] against floating-point excursion.
pub fn cosine_similarity(
    a: &EmbeddingVector,
    b: &EmbeddingVector,
) -> Result<f64, EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    let dot: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| x * y)
        .sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Similarity used for probe scoring: a zero embedding (text with no overlap
/// with the backend's vocabulary, on the synthetic mock) scores 0.
fn probe_similarity(
    image: &EmbeddingVector,
    text: &EmbeddingVector,
) -> Result<f64, EmbeddingError> {
    if image.is_zero() || text.is_zero() {
        if image.dim() != text.dim() {
            return Err(EmbeddingError::DimensionMismatch {
                expected: image.dim(),
                got: text.dim(),
            });
        }
        return Ok(0.0);
    }
    cosine_similarity(image, text)
}

/// Pairwise softmax: probability of the positive similarity.
pub fn softmax_positive(s_pos: f64, s_neg: f64) -> f64 {
    // Computed as a logistic of the difference for numerical stability.
    1.0 / (1.0 + (s_neg - s_pos).exp())
}

pub fn score_probe(
    backend: &dyn EmbeddingBackend,
    image_ref: &str,
    probe: &FindingProbe,
    cfg: &VlmConfig,
) -> Result<FindingObservation, EmbeddingError> {
    let image = backend.embed_image(image_ref)?;
    let pos_vec = backend.embed_text(probe.positive())?;
    let s_pos = probe_similarity(&image, &pos_vec)?;

    let (p_positive, s_neg) = match cfg.negation_mode {
        NegationScoring::Contrastive => {
            let neg_vec = backend.embed_text(probe.negative())?;
            let s_neg = probe_similarity(&image, &neg_vec)?;
            (softmax_positive(s_pos, s_neg), Some(s_neg))
        }
        NegationScoring::PositiveOnly => ((s_pos + 1.0) / 2.0, None),
    };
    let verdict = if p_positive > cfg.psi {
        Verdict::Positive
    } else {
        Verdict::Negative
    };
    Ok(FindingObservation {
        probe: probe.clone(),
        p_positive,
        verdict,
        s_pos,
        s_neg,
    })
}
