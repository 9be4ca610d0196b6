//! Screening agent: renders the screening prompt, runs the
//! generate -> parse tool call -> score -> inject result loop, and collects
//! finding observations for one (patient, disease) pair.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{
    score_probe, EmbeddingBackend, EmbeddingError, FindingObservation, FindingProbe, VlmConfig,
};
use crate::guidelines::{render_finding_block, Disease};
use crate::llm::{Conversation, FinishReason, LlmBackend, LlmError, SamplingParams};

pub const DEFAULT_SCREENING_TEMPLATE: &str = include_str!("templates/screening.txt");

/// Stop sequence that interrupts generation at the tool-call arrow.
pub const TOOL_CALL_STOP: &str = "->";

const MALFORMED_ABORT_THRESHOLD: u32 = 3;

#[derive(Debug, Error)]
pub enum ScreeningError {
    #[error("screening aborted after {consecutive} consecutive malformed tool calls")]
    Failed {
        consecutive: u32,
        transcript: Box<ScreeningTranscript>,
    },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MalformedKind {
    NoClipKeyword,
    NoSlashSeparator,
    EmptyDescription,
}

#[derive(Debug, Clone, Error, Serialize, Deserialize)]
#[error("malformed tool call ({kind:?}): {segment:?}")]
pub struct MalformedToolCall {
    pub kind: MalformedKind,
    pub segment: String,
}

/// A parsed `CLIP: positive / negative ->` invocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub positive: String,
    pub negative: String,
    /// Character offsets of the matched call within the segment it was parsed
    /// from, for trace rendering.
    pub source_span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "text")]
pub enum TranscriptSegment {
    /// Text produced by the agent.
    Generated(String),
    /// Tool result or corrective line injected by the engine.
    Injected(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub segment: String,
    pub kind: MalformedKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningTranscript {
    pub disease: String,
    pub segments: Vec<TranscriptSegment>,
    pub observations: Vec<FindingObservation>,
    pub parse_failures: Vec<ParseFailure>,
}

/// Who writes the negative description scored against the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegationMode {
    /// The agent-written negation is used verbatim.
    Llm,
    /// Rule-based negation: "No " prepended to the positive description.
    Naive,
}

#[derive(Debug, Clone)]
pub struct ScreeningOptions {
    pub vlm: VlmConfig,
    pub negation_mode: NegationMode,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Loop bound; defaults to 2 x |findings| when None.
    pub max_tool_calls: Option<usize>,
    pub template: String,
}

/// Fill the screening template for one disease.
pub fn build_screening_prompt(disease: &Disease, template: &str) -> Conversation {
    let filled = template
        .replace("<xplainer_findings>", &render_finding_block(disease))
        .replace("<condition>", disease.name());
    Conversation::user(filled)
}

/// Parse the last `CLIP:` invocation from an assistant segment generated up to
/// (not including) a stop at the arrow.
pub fn parse_tool_call(segment: &str) -> Result<ToolCall, MalformedToolCall> {
    let start = segment.rfind("CLIP:").ok_or_else(|| MalformedToolCall {
        kind: MalformedKind::NoClipKeyword,
        segment: segment.to_string(),
    })?;
    let call_body = &segment[start + "CLIP:".len()..];
    let slash = call_body.find('/').ok_or_else(|| MalformedToolCall {
        kind: MalformedKind::NoSlashSeparator,
        segment: segment.to_string(),
    })?;
    let positive = call_body[..slash].trim();
    let negative = call_body[slash + 1..].trim();
    if positive.is_empty() || negative.is_empty() {
        return Err(MalformedToolCall {
            kind: MalformedKind::EmptyDescription,
            segment: segment.to_string(),
        });
    }
    Ok(ToolCall {
        positive: positive.to_string(),
        negative: negative.to_string(),
        source_span: (start, segment.len()),
    })
}

/// Rule-based negation: prepend "No " and lowercase the original first letter.
/// Not idempotent; callers apply it exactly once.
pub fn naive_negation(finding_description: &str) -> String {
    let mut chars = finding_description.chars();
    match chars.next() {
        Some(first) => format!("No {}{}", first.to_lowercase(), chars.as_str()),
        None => String::from("No "),
    }
}

/// Run the screening loop for one (image, disease) pair.
pub fn run_screening(
    llm: &dyn LlmBackend,
    embedder: &dyn EmbeddingBackend,
    image_ref: &str,
    disease: &Disease,
    opts: &ScreeningOptions,
) -> Result<ScreeningTranscript, ScreeningError> {
    let conv = build_screening_prompt(disease, &opts.template);
    let params = SamplingParams::new(
        opts.temperature,
        opts.max_tokens,
        vec![TOOL_CALL_STOP.to_string()],
    )?;
    let max_tool_calls = opts
        .max_tool_calls
        .unwrap_or(2 * disease.findings().len());

    let mut transcript = ScreeningTranscript {
        disease: disease.name().to_string(),
        segments: Vec::new(),
        observations: Vec::new(),
        parse_failures: Vec::new(),
    };
    let mut partial = String::new();
    let mut consecutive_malformed = 0u32;

    let mut completion = llm.generate(&conv, &params)?;
    loop {
        if !completion.text.is_empty() {
            transcript
                .segments
                .push(TranscriptSegment::Generated(completion.text.clone()));
            partial.push_str(&completion.text);
        }
        match completion.finish_reason {
            FinishReason::EndOfMessage | FinishReason::MaxTokens => break,
            FinishReason::StopSequence(_) => {
                let injected = match parse_tool_call(&completion.text) {
                    Ok(call) => {
                        consecutive_malformed = 0;
                        let negative = match opts.negation_mode {
                            NegationMode::Llm => call.negative.clone(),
                            NegationMode::Naive => naive_negation(&call.positive),
                        };
                        let probe = FindingProbe::new(call.positive.clone(), negative)?;
                        let obs = score_probe(embedder, image_ref, &probe, &opts.vlm)?;
                        let line = format!("-> {}\n", obs.verdict);
                        transcript.observations.push(obs);
                        line
                    }
                    Err(malformed) => {
                        consecutive_malformed += 1;
                        transcript.parse_failures.push(ParseFailure {
                            segment: malformed.segment.clone(),
                            kind: malformed.kind,
                        });
                        if consecutive_malformed >= MALFORMED_ABORT_THRESHOLD {
                            return Err(ScreeningError::Failed {
                                consecutive: consecutive_malformed,
                                transcript: Box::new(transcript),
                            });
                        }
                        "-> Error: malformed call, continue.\n".to_string()
                    }
                };
                transcript
                    .segments
                    .push(TranscriptSegment::Injected(injected.clone()));
                partial.push_str(&injected);
                if transcript.observations.len() >= max_tool_calls {
                    break;
                }
                completion = llm.continue_generation(&conv, &partial, &params)?;
            }
        }
    }
    Ok(transcript)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{NegationScoring, Verdict};
    use crate::embedding::{SyntheticImage, SyntheticWorld};
    use crate::guidelines::Finding;
    use crate::llm::{MockBackend, ScriptRule};

    fn disease() -> Disease {
        Disease::new(
            "Cardiomegaly",
            vec![
                Finding::new("enlarged cardiac silhouette").unwrap(),
                Finding::new("cephalization of vessels").unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn prompt_substitutes_both_placeholders() {
        let conv = build_screening_prompt(&disease(), DEFAULT_SCREENING_TEMPLATE);
        let text = &conv.turns()[0].1;
        assert!(text.contains("presence or absence of Cardiomegaly"));
        assert!(text.contains("enlarged cardiac silhouette\ncephalization of vessels"));
        assert!(!text.contains("<condition>"));
        assert!(!text.contains("<xplainer_findings>"));
    }

    #[test]
    fn prompts_differ_only_at_substitution_sites() {
        let other = Disease::new("Edema", vec![Finding::new("interstitial markings").unwrap()])
            .unwrap();
        let a = build_screening_prompt(&disease(), DEFAULT_SCREENING_TEMPLATE);
        let b = build_screening_prompt(&other, DEFAULT_SCREENING_TEMPLATE);
        assert_ne!(a, b);
        // Shared preamble before the first substitution site is identical.
        let prefix = "You are a screening agent";
        assert!(a.turns()[0].1.starts_with(prefix));
        assert!(b.turns()[0].1.starts_with(prefix));
    }

    #[test]
    fn parses_template_example_call() {
        let segment = "CLIP: There is an increased width of the heart shadow indicating an \
            enlarged cardiomediastinum. / There is a normal heart shadow indicating no enlarged \
            cardiomediastinum. ";
        let call = parse_tool_call(segment).unwrap();
        assert!(call.positive.starts_with("There is an increased width"));
        assert!(call.negative.starts_with("There is a normal heart shadow"));
    }

    #[test]
    fn malformed_classes_detected() {
        assert_eq!(
            parse_tool_call("no tool call here").unwrap_err().kind,
            MalformedKind::NoClipKeyword
        );
        assert_eq!(
            parse_tool_call("CLIP: only a positive part ").unwrap_err().kind,
            MalformedKind::NoSlashSeparator
        );
        assert_eq!(
            parse_tool_call("CLIP:  / something").unwrap_err().kind,
            MalformedKind::EmptyDescription
        );
    }

    #[test]
    fn naive_negation_prepends_no_and_lowercases() {
        assert_eq!(
            naive_negation("Abnormal contour of the heart border"),
            "No abnormal contour of the heart border"
        );
        assert_eq!(naive_negation("edema present"), "No edema present");
        // Documented non-property: applying twice stacks the prefix.
        assert_eq!(
            naive_negation(&naive_negation("Edema")),
            "No no edema"
        );
    }

    fn world() -> SyntheticWorld {
        SyntheticWorld::new(
            vec![
                "enlarged cardiac silhouette".into(),
                "cephalization of vessels".into(),
            ],
            vec![SyntheticImage {
                id: "img1".into(),
                findings: vec!["enlarged cardiac silhouette".into()],
            }],
        )
        .unwrap()
    }

    fn opts() -> ScreeningOptions {
        ScreeningOptions {
            vlm: VlmConfig::new(0.5, NegationScoring::Contrastive).unwrap(),
            negation_mode: NegationMode::Llm,
            temperature: 0.0,
            max_tokens: 1024,
            max_tool_calls: None,
            template: DEFAULT_SCREENING_TEMPLATE.to_string(),
        }
    }

    const CALL_1: &str =
        "CLIP: There is an enlarged cardiac silhouette. / There is a normal heart size. ->";
    const CALL_2: &str =
        "CLIP: There is cephalization of vessels. / There is normal vascular distribution. ->";

    fn faithful_mock() -> MockBackend {
        MockBackend::new(
            vec![
                ScriptRule::substring(
                    "CLIP: There is cephalization of vessels.",
                    "\nAll findings evaluated.",
                ),
                ScriptRule::substring(
                    "CLIP: There is an enlarged cardiac silhouette.",
                    CALL_2,
                ),
                ScriptRule::substring("You are a screening agent", CALL_1),
            ],
            "",
        )
        .unwrap()
    }

    #[test]
    fn two_finding_loop_matches_oracle_truth() {
        let transcript =
            run_screening(&faithful_mock(), &world(), "img1", &disease(), &opts()).unwrap();
        assert_eq!(transcript.observations.len(), 2);
        assert_eq!(transcript.observations[0].verdict, Verdict::Positive);
        assert_eq!(transcript.observations[1].verdict, Verdict::Negative);
        assert!(transcript.parse_failures.is_empty());
    }

    #[test]
    fn zero_tool_calls_yield_empty_observations() {
        let mock = MockBackend::new(vec![], "I see nothing to test.").unwrap();
        let transcript = run_screening(&mock, &world(), "img1", &disease(), &opts()).unwrap();
        assert!(transcript.observations.is_empty());
    }

    #[test]
    fn malformed_call_is_skipped_then_loop_continues() {
        let mock = MockBackend::new(
            vec![
                ScriptRule::substring("CLIP: There is cephalization of vessels.", "\nDone."),
                ScriptRule::substring("CLIP: There is an enlarged cardiac silhouette.", CALL_2),
                ScriptRule::substring("malformed call, continue", CALL_1),
                ScriptRule::substring("You are a screening agent", "CLIP: broken call ->"),
            ],
            "",
        )
        .unwrap();
        let transcript = run_screening(&mock, &world(), "img1", &disease(), &opts()).unwrap();
        assert_eq!(transcript.observations.len(), 2);
        assert_eq!(transcript.parse_failures.len(), 1);
        assert_eq!(
            transcript.parse_failures[0].kind,
            MalformedKind::NoSlashSeparator
        );
    }

    #[test]
    fn three_consecutive_malformed_calls_abort() {
        let mock = MockBackend::new(vec![], "CLIP: never a slash ->").unwrap();
        let err = run_screening(&mock, &world(), "img1", &disease(), &opts()).unwrap_err();
        match err {
            ScreeningError::Failed {
                consecutive,
                transcript,
            } => {
                assert_eq!(consecutive, 3);
                assert_eq!(transcript.parse_failures.len(), 3);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn naive_mode_replaces_agent_negative() {
        let mut o = opts();
        o.negation_mode = NegationMode::Naive;
        let transcript =
            run_screening(&faithful_mock(), &world(), "img1", &disease(), &o).unwrap();
        for obs in &transcript.observations {
            assert!(obs.probe.negative().starts_with("No "));
            let expected = naive_negation(obs.probe.positive());
            assert_eq!(obs.probe.negative(), expected);
        }
    }

    #[test]
    fn deterministic_at_temperature_zero() {
        let a = run_screening(&faithful_mock(), &world(), "img1", &disease(), &opts()).unwrap();
        let b = run_screening(&faithful_mock(), &world(), "img1", &disease(), &opts()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tool_call_cap_bounds_the_loop() {
        // Mock that keeps emitting the same call forever.
        let mock = MockBackend::new(
            vec![ScriptRule::substring(
                "screening agent",
                "CLIP: There is an enlarged cardiac silhouette. / There is a normal heart size. ->",
            )],
            "CLIP: There is an enlarged cardiac silhouette. / There is a normal heart size. ->",
        )
        .unwrap();
        let transcript = run_screening(&mock, &world(), "img1", &disease(), &opts()).unwrap();
        assert_eq!(transcript.observations.len(), 4); // 2 x |findings|
    }
}
