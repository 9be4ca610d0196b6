//! Synthetic oracle world: texts embed as L2-normalized indicator vectors over
//! a finding-token vocabulary, images as indicators of their declared true
//! findings. Pipeline correctness over this world is exactly decidable.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmbeddingBackend, EmbeddingError, EmbeddingVector};

/// Threshold at which the synthetic world's verdicts coincide with its ground
/// truth: a matching positive / non-matching negative pair gives s_pos > 0,
/// s_neg = 0, so any p > 0.5 cut separates them.
pub const SYNTHETIC_ORACLE_PSI: f64 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticImage {
    pub id: String,
    pub findings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticWorld {
    vocabulary: Vec<String>,
    images: Vec<SyntheticImage>,
    #[serde(skip)]
    image_index: HashMap<String, usize>,
}

impl SyntheticWorld {
    pub fn new(
        vocabulary: Vec<String>,
        images: Vec<SyntheticImage>,
    ) -> Result<Self, EmbeddingError> {
        if vocabulary.len() < 2 {
            return Err(EmbeddingError::InvalidInput(
                "vocabulary needs at least 2 tokens".into(),
            ));
        }
        let lower: Vec<String> = vocabulary.iter().map(|t| t.to_lowercase()).collect();
        for (i, t) in lower.iter().enumerate() {
            if t.is_empty() {
                return Err(EmbeddingError::InvalidInput("empty vocabulary token".into()));
            }
            for (j, u) in lower.iter().enumerate() {
                if i != j && u.contains(t.as_str()) {
                    return Err(EmbeddingError::InvalidInput(format!(
                        "vocabulary token {:?} is a substring of {:?}",
                        vocabulary[i], vocabulary[j]
                    )));
                }
            }
        }
        let mut image_index = HashMap::new();
        for (i, img) in images.iter().enumerate() {
            if image_index.insert(img.id.clone(), i).is_some() {
                return Err(EmbeddingError::InvalidInput(format!(
                    "duplicate image id {:?}",
                    img.id
                )));
            }
            for f in &img.findings {
                if !lower.contains(&f.to_lowercase()) {
                    return Err(EmbeddingError::InvalidInput(format!(
                        "image {:?} declares unknown finding {:?}",
                        img.id, f
                    )));
                }
            }
        }
        Ok(Self {
            vocabulary,
            images,
            image_index,
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| {
            EmbeddingError::InvalidInput(format!("cannot read world {}: {e}", path.display()))
        })?;
        #[derive(Deserialize)]
        struct Raw {
            vocabulary: Vec<String>,
            images: Vec<SyntheticImage>,
        }
        let raw: Raw = serde_json::from_slice(&bytes).map_err(|e| {
            EmbeddingError::InvalidInput(format!("bad world file {}: {e}", path.display()))
        })?;
        Self::new(raw.vocabulary, raw.images)
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn images(&self) -> &[SyntheticImage] {
        &self.images
    }

    /// Ground truth: does the image declare this finding token?
    pub fn image_has_finding(&self, image_ref: &str, token: &str) -> Option<bool> {
        self.image_index.get(image_ref).map(|&i| {
            self.images[i]
                .findings
                .iter()
                .any(|f| f.eq_ignore_ascii_case(token))
        })
    }

    fn normalized_indicator(&self, on: impl Fn(&str) -> bool) -> EmbeddingVector {
        let mut values: Vec<f64> = self
            .vocabulary
            .iter()
            .map(|t| if on(t) { 1.0 } else { 0.0 })
            .collect();
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut values {
                *v /= norm;
            }
        }
        EmbeddingVector::new(values).expect("vocabulary dimension >= 2, entries finite")
    }
}

impl EmbeddingBackend for SyntheticWorld {
    fn dim(&self) -> usize {
        self.vocabulary.len()
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if text.is_empty() {
            return Err(EmbeddingError::InvalidInput("empty text".into()));
        }
        let lower = text.to_lowercase();
        Ok(self.normalized_indicator(|token| lower.contains(&token.to_lowercase())))
    }

    fn embed_image(&self, image_ref: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let &idx = self
            .image_index
            .get(image_ref)
            .ok_or_else(|| EmbeddingError::NotFound(image_ref.to_string()))?;
        let findings: Vec<String> = self.images[idx]
            .findings
            .iter()
            .map(|f| f.to_lowercase())
            .collect();
        Ok(self.normalized_indicator(|token| findings.contains(&token.to_lowercase())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{
        score_probe, FindingProbe, NegationScoring, Verdict, VlmConfig,
    };

    fn world() -> SyntheticWorld {
        SyntheticWorld::new(
            vec!["cardiomegaly".into(), "edema".into(), "opacity".into()],
            vec![
                SyntheticImage {
                    id: "img1".into(),
                    findings: vec!["cardiomegaly".into(), "opacity".into()],
                },
                SyntheticImage {
                    id: "img2".into(),
                    findings: vec![],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn text_embeds_as_unit_indicator() {
        let w = world();
        let v = w.embed_text("There is cardiomegaly present.").unwrap();
        assert_eq!(v.values(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn image_embeds_as_normalized_sum_of_true_findings() {
        let w = world();
        let v = w.embed_image("img1").unwrap();
        let s = 2f64.sqrt().recip();
        assert!((v.values()[0] - s).abs() < 1e-15);
        assert_eq!(v.values()[1], 0.0);
        assert!((v.values()[2] - s).abs() < 1e-15);
    }

    #[test]
    fn unknown_image_is_not_found() {
        assert!(matches!(
            world().embed_image("nope"),
            Err(EmbeddingError::NotFound(_))
        ));
    }

    #[test]
    fn embeddings_are_deterministic() {
        let w = world();
        assert_eq!(w.embed_text("edema").unwrap(), w.embed_text("edema").unwrap());
        assert_eq!(w.embed_image("img1").unwrap(), w.embed_image("img1").unwrap());
    }

    #[test]
    fn oracle_calibration_separates_present_and_absent() {
        let w = world();
        let cfg = VlmConfig::new(SYNTHETIC_ORACLE_PSI, NegationScoring::Contrastive).unwrap();
        let present = FindingProbe::new(
            "There is cardiomegaly.",
            "There is a normal heart silhouette.",
        )
        .unwrap();
        let absent =
            FindingProbe::new("There is edema.", "There is a dry lung field.").unwrap();
        assert_eq!(
            score_probe(&w, "img1", &present, &cfg).unwrap().verdict,
            Verdict::Positive
        );
        assert_eq!(
            score_probe(&w, "img1", &absent, &cfg).unwrap().verdict,
            Verdict::Negative
        );
        // Empty image: everything negative.
        assert_eq!(
            score_probe(&w, "img2", &present, &cfg).unwrap().verdict,
            Verdict::Negative
        );
    }

    #[test]
    fn substring_vocabulary_rejected() {
        assert!(SyntheticWorld::new(
            vec!["edema".into(), "pulmonary edema".into()],
            vec![]
        )
        .is_err());
    }
}
