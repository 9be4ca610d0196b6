//! Per-disease guideline finding lists: loading, validation, rendering, and
//! LLM-assisted extraction from unstructured prose.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{Conversation, LlmBackend, LlmError, SamplingParams};

/// Tokens that may never appear inside a finding description because they are
/// reserved by the screening tool-call grammar.
pub const RESERVED_TOKENS: [&str; 3] = ["CLIP:", "/", "->"];

#[derive(Debug, Error)]
pub enum GuidelineError {
    #[error("guideline file not found: {0}")]
    FileNotFound(String),
    #[error("parse error at {location}: {reason}")]
    Parse { location: String, reason: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("llm backend error: {0}")]
    Backend(#[from] LlmError),
    #[error("no parseable finding extracted after {attempts} attempts")]
    ExtractionEmpty { attempts: u32 },
    #[error("prose must be non-empty")]
    EmptyProse,
}

/// A single positively-phrased image finding description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Finding {
    description: String,
}

impl Finding {
    pub fn new(description: impl Into<String>) -> Result<Self, GuidelineError> {
        let description = description.into().trim().to_string();
        if description.is_empty() {
            return Err(GuidelineError::Validation(
                "finding description is empty".into(),
            ));
        }
        for token in RESERVED_TOKENS {
            if description.contains(token) {
                return Err(GuidelineError::Validation(format!(
                    "finding description contains reserved token {token:?}: {description:?}"
                )));
            }
        }
        Ok(Self { description })
    }

    pub fn description(&self) -> &str {
        &self.description
    }
}

/// A disease with its ordered, duplicate-free finding list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Disease {
    name: String,
    findings: Vec<Finding>,
}

impl Disease {
    pub fn new(name: impl Into<String>, findings: Vec<Finding>) -> Result<Self, GuidelineError> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(GuidelineError::Validation("disease name is empty".into()));
        }
        if findings.is_empty() {
            return Err(GuidelineError::Validation(format!(
                "disease {name:?} has no findings"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for f in &findings {
            if !seen.insert(f.description().to_lowercase()) {
                return Err(GuidelineError::Validation(format!(
                    "disease {name:?} has duplicate finding {:?}",
                    f.description()
                )));
            }
        }
        Ok(Self { name, findings })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn findings(&self) -> &[Finding] {
        &self.findings
    }
}

/// The full guideline document: ordered diseases plus an optional absence label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidelineSet {
    diseases: Vec<Disease>,
    no_finding_label: Option<String>,
}

impl GuidelineSet {
    pub fn new(
        diseases: Vec<Disease>,
        no_finding_label: Option<String>,
    ) -> Result<Self, GuidelineError> {
        let mut seen = std::collections::HashSet::new();
        for d in &diseases {
            if !seen.insert(d.name().to_lowercase()) {
                return Err(GuidelineError::Validation(format!(
                    "duplicate disease name {:?}",
                    d.name()
                )));
            }
        }
        if let Some(label) = &no_finding_label {
            if seen.contains(&label.to_lowercase()) {
                return Err(GuidelineError::Validation(format!(
                    "no-finding label {label:?} collides with a disease name"
                )));
            }
        }
        Ok(Self {
            diseases,
            no_finding_label,
        })
    }

    pub fn diseases(&self) -> &[Disease] {
        &self.diseases
    }

    pub fn no_finding_label(&self) -> Option<&str> {
        self.no_finding_label.as_deref()
    }

    /// Case-insensitive lookup preserving the stored casing.
    pub fn disease(&self, name: &str) -> Option<&Disease> {
        self.diseases
            .iter()
            .find(|d| d.name().eq_ignore_ascii_case(name))
    }
}

#[derive(Deserialize)]
struct RawGuidelines {
    #[serde(default)]
    no_finding_label: Option<String>,
    diseases: Vec<RawDisease>,
}

#[derive(Deserialize)]
struct RawDisease {
    name: String,
    findings: Vec<String>,
}

/// Load and validate a guideline document from a JSON file.
pub fn load_guidelines(path: impl AsRef<Path>) -> Result<GuidelineSet, GuidelineError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            GuidelineError::FileNotFound(path.display().to_string())
        } else {
            GuidelineError::Parse {
                location: path.display().to_string(),
                reason: e.to_string(),
            }
        }
    })?;
    parse_guidelines(&bytes, &path.display().to_string())
}

pub fn parse_guidelines(bytes: &[u8], location: &str) -> Result<GuidelineSet, GuidelineError> {
    let raw: RawGuidelines = serde_json::from_slice(bytes).map_err(|e| GuidelineError::Parse {
        location: format!("{location}:{}", e.line()),
        reason: e.to_string(),
    })?;
    let mut diseases = Vec::with_capacity(raw.diseases.len());
    for rd in raw.diseases {
        let findings = rd
            .findings
            .into_iter()
            .map(Finding::new)
            .collect::<Result<Vec<_>, _>>()?;
        diseases.push(Disease::new(rd.name, findings)?);
    }
    GuidelineSet::new(diseases, raw.no_finding_label)
}

/// Render a disease's findings one per line, no trailing newline, for the
/// `<xplainer_findings>` slot of the screening prompt.
pub fn render_finding_block(disease: &Disease) -> String {
    disease
        .findings()
        .iter()
        .map(Finding::description)
        .collect::<Vec<_>>()
        .join("\n")
}

const EXTRACTION_PROMPT: &str = "You are a medical knowledge assistant. Extract the fine-grained \
image findings indicative of the disease from the description below. List each finding as a short, \
positively phrased sentence fragment on its own line, prefixed with \"- \". Do not include \
negations, explanations, or any other text.";

/// Extract structured findings from unstructured prose with an LLM call,
/// accepting dash- or asterisk-prefixed bullet lines only.
pub fn extract_findings(
    prose: &str,
    disease_name: &str,
    llm: &dyn LlmBackend,
    max_retries: u32,
) -> Result<Vec<Finding>, GuidelineError> {
    if prose.trim().is_empty() {
        return Err(GuidelineError::EmptyProse);
    }
    let conv = Conversation::new(
        Some(EXTRACTION_PROMPT.to_string()),
        vec![(
            crate::llm::Role::User,
            format!("Disease: {disease_name}\n\nDescription:\n{prose}"),
        )],
    )
    .expect("single user turn is a valid conversation");
    let params = SamplingParams::deterministic();

    let attempts = max_retries.max(1);
    for _ in 0..attempts {
        let completion = llm.generate(&conv, &params)?;
        let findings = parse_bullet_findings(&completion.text);
        if !findings.is_empty() {
            return findings.into_iter().map(Finding::new).collect();
        }
    }
    Err(GuidelineError::ExtractionEmpty { attempts })
}

fn parse_bullet_findings(text: &str) -> Vec<String> {
    text.lines()
        .filter_map(|line| {
            let line = line.trim();
            line.strip_prefix("- ")
                .or_else(|| line.strip_prefix("* "))
                .map(|rest| rest.trim().to_string())
        })
        .filter(|s| !s.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{MockBackend, ScriptRule};

    #[test]
    fn loads_single_disease_document() {
        let doc = r#"{"diseases": [{"name": "Enlarged Cardiomediastinum",
            "findings": ["Abnormal contour of the heart border"]}]}"#;
        let set = parse_guidelines(doc.as_bytes(), "inline").unwrap();
        assert_eq!(set.diseases().len(), 1);
        let d = &set.diseases()[0];
        assert_eq!(d.name(), "Enlarged Cardiomediastinum");
        assert_eq!(
            d.findings()[0].description(),
            "Abnormal contour of the heart border"
        );
    }

    #[test]
    fn empty_file_is_a_parse_error() {
        let err = parse_guidelines(b"", "inline").unwrap_err();
        assert!(matches!(err, GuidelineError::Parse { .. }));
    }

    #[test]
    fn duplicate_disease_names_differ_only_in_case() {
        let doc = r#"{"diseases": [
            {"name": "Edema", "findings": ["a"]},
            {"name": "edema", "findings": ["b"]}]}"#;
        let err = parse_guidelines(doc.as_bytes(), "inline").unwrap_err();
        assert!(matches!(err, GuidelineError::Validation(_)));
    }

    #[test]
    fn no_finding_label_may_not_collide() {
        let doc = r#"{"no_finding_label": "edema",
            "diseases": [{"name": "Edema", "findings": ["a"]}]}"#;
        assert!(parse_guidelines(doc.as_bytes(), "inline").is_err());
    }

    #[test]
    fn reserved_tokens_rejected_in_findings() {
        for bad in ["uses CLIP: tool", "a / b", "x -> y"] {
            assert!(Finding::new(bad).is_err(), "{bad:?} should be rejected");
        }
    }

    #[test]
    fn render_round_trips() {
        let d = Disease::new(
            "X",
            ["A", "B", "C", "D", "E"]
                .iter()
                .map(|s| Finding::new(*s).unwrap())
                .collect(),
        )
        .unwrap();
        let block = render_finding_block(&d);
        assert!(!block.ends_with('\n'));
        let lines: Vec<&str> = block.lines().collect();
        let descriptions: Vec<&str> = d.findings().iter().map(Finding::description).collect();
        assert_eq!(lines, descriptions);
    }

    #[test]
    fn render_single_finding_has_no_newline() {
        let d = Disease::new("X", vec![Finding::new("only one").unwrap()]).unwrap();
        assert_eq!(render_finding_block(&d), "only one");
    }

    #[test]
    fn load_is_deterministic() {
        let doc = r#"{"diseases": [{"name": "A", "findings": ["f1", "f2"]},
                                   {"name": "B", "findings": ["g1"]}]}"#;
        let a = parse_guidelines(doc.as_bytes(), "inline").unwrap();
        let b = parse_guidelines(doc.as_bytes(), "inline").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn extracts_bulleted_findings_from_mock() {
        let mock = MockBackend::new(
            vec![ScriptRule::substring(
                "cardiomegaly",
                "- Enlarged cardiac silhouette\n- Increased cardiothoracic ratio\n* Rounded heart apex",
            )],
            "no match",
        )
        .unwrap();
        let findings = extract_findings(
            "Cardiomegaly presents with an enlarged heart on frontal films.",
            "cardiomegaly",
            &mock,
            3,
        )
        .unwrap();
        assert_eq!(findings.len(), 3);
        assert_eq!(findings[0].description(), "Enlarged cardiac silhouette");
        assert_eq!(findings[2].description(), "Rounded heart apex");
    }

    #[test]
    fn empty_prose_rejected() {
        let mock = MockBackend::new(vec![], "anything").unwrap();
        assert!(matches!(
            extract_findings("   ", "x", &mock, 3),
            Err(GuidelineError::EmptyProse)
        ));
    }

    #[test]
    fn unbulleted_reply_exhausts_retries() {
        let mock = MockBackend::new(vec![], "I cannot list findings.").unwrap();
        let err = extract_findings("some prose", "x", &mock, 3).unwrap_err();
        assert!(matches!(
            err,
            GuidelineError::ExtractionEmpty { attempts: 3 }
        ));
    }
}
