//! Diagnosis agent: presents screening observations, elicits chain-of-thought
//! reasoning, and parses the binary answer sentinel.

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

use crate::embedding::FindingObservation;
use crate::llm::{Conversation, LlmBackend, LlmError, Role, SamplingParams};

pub const DEFAULT_DIAGNOSIS_TEMPLATE: &str = include_str!("templates/diagnosis.txt");

const RETRY_REMINDER: &str = "Please answer again and end your reasoning with one of these exact \
sentences: \"Therefore, my answer is: yes.\" or \"Therefore, my answer is: no.\"";

#[derive(Debug, Error)]
pub enum DiagnosisError {
    #[error("no answer sentinel found")]
    AnswerNotFound,
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisResult {
    pub disease: String,
    pub prediction: bool,
    pub reasoning: String,
    pub parse_attempts: u32,
    /// Set when the sentinel never parsed and the conservative negative
    /// fallback was applied.
    pub fallback: bool,
}

fn sentinel_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)therefore,\s*my\s+answer\s+is:\s*(yes|no)\.?").expect("valid regex")
    })
}

/// Locate the last sentinel occurrence; reasoning is the text before it.
pub fn parse_answer(text: &str) -> Result<(bool, String), DiagnosisError> {
    let last = sentinel_regex()
        .captures_iter(text)
        .last()
        .ok_or(DiagnosisError::AnswerNotFound)?;
    let whole = last.get(0).expect("capture 0 always present");
    let prediction = last
        .get(1)
        .expect("sentinel has a yes/no group")
        .as_str()
        .eq_ignore_ascii_case("yes");
    let reasoning = text[..whole.start()].trim().to_string();
    Ok((prediction, reasoning))
}

/// One line per observation: "<description>: Positive|Negative".
pub fn render_findings_block(observations: &[FindingObservation]) -> String {
    observations
        .iter()
        .map(|o| format!("{}: {}", o.probe.positive(), o.verdict))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_diagnosis_prompt(
    observations: &[FindingObservation],
    disease: &str,
    template: &str,
) -> Conversation {
    let filled = template
        .replace("<findings>", &render_findings_block(observations))
        .replace("<condition>", disease);
    Conversation::user(filled)
}

#[derive(Debug, Clone)]
pub struct DiagnosisOptions {
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_retries: u32,
    pub template: String,
}

pub fn run_diagnosis(
    llm: &dyn LlmBackend,
    observations: &[FindingObservation],
    disease: &str,
    opts: &DiagnosisOptions,
) -> Result<DiagnosisResult, DiagnosisError> {
    let mut conv = build_diagnosis_prompt(observations, disease, &opts.template);
    let params = SamplingParams::new(opts.temperature, opts.max_tokens, vec![])?;
    let attempts = opts.max_retries.max(1);

    let mut last_text = String::new();
    for attempt in 1..=attempts {
        let completion = llm.generate(&conv, &params)?;
        last_text = completion.text;
        match parse_answer(&last_text) {
            Ok((prediction, reasoning)) => {
                return Ok(DiagnosisResult {
                    disease: disease.to_string(),
                    prediction,
                    reasoning,
                    parse_attempts: attempt,
                    fallback: false,
                });
            }
            Err(DiagnosisError::AnswerNotFound) if attempt < attempts => {
                conv.push(Role::Assistant, last_text.clone())?;
                conv.push(Role::User, RETRY_REMINDER)?;
            }
            Err(DiagnosisError::AnswerNotFound) => break,
            Err(e) => return Err(e),
        }
    }
    // Conservative fallback: negative, raw completion kept verbatim.
    Ok(DiagnosisResult {
        disease: disease.to_string(),
        prediction: false,
        reasoning: last_text,
        parse_attempts: attempts,
        fallback: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{score_probe, FindingProbe, NegationScoring, VlmConfig};
    use crate::embedding::{SyntheticImage, SyntheticWorld};
    use crate::llm::{MockBackend, ScriptRule};

    #[test]
    fn parses_yes_answer_and_strips_sentinel() {
        let (p, r) =
            parse_answer("Findings suggest enlargement. Therefore, my answer is: yes.").unwrap();
        assert!(p);
        assert_eq!(r, "Findings suggest enlargement.");
    }

    #[test]
    fn parses_no_answer() {
        let (p, r) = parse_answer("The findings are uncertain. Therefore, my answer is: no.")
            .unwrap();
        assert!(!p);
        assert_eq!(r, "The findings are uncertain.");
    }

    #[test]
    fn missing_sentinel_is_an_error() {
        assert!(matches!(
            parse_answer("The image looks abnormal."),
            Err(DiagnosisError::AnswerNotFound)
        ));
    }

    #[test]
    fn last_sentinel_wins() {
        let text = "Hm. Therefore, my answer is: no. Wait, on reflection \
            Therefore, my answer is: yes.";
        let (p, _) = parse_answer(text).unwrap();
        assert!(p);
    }

    #[test]
    fn sentinel_tolerates_case_and_missing_period() {
        let (p, _) = parse_answer("reasoning THEREFORE, MY ANSWER IS: YES").unwrap();
        assert!(p);
    }

    fn observations() -> Vec<FindingObservation> {
        let world = SyntheticWorld::new(
            vec!["enlarged heart".into(), "clear lungs".into()],
            vec![SyntheticImage {
                id: "img".into(),
                findings: vec!["enlarged heart".into()],
            }],
        )
        .unwrap();
        let cfg = VlmConfig::new(0.5, NegationScoring::Contrastive).unwrap();
        ["enlarged heart", "clear lungs"]
            .iter()
            .map(|f| {
                let probe =
                    FindingProbe::new(format!("There is {f}."), "There is nothing.").unwrap();
                score_probe(&world, "img", &probe, &cfg).unwrap()
            })
            .collect()
    }

    #[test]
    fn prompt_lists_findings_with_verdicts() {
        let conv =
            build_diagnosis_prompt(&observations(), "Cardiomegaly", DEFAULT_DIAGNOSIS_TEMPLATE);
        let text = &conv.turns()[0].1;
        assert!(text.contains("There is enlarged heart.: Positive"));
        assert!(text.contains("There is clear lungs.: Negative"));
        assert!(text.trim_end().ends_with("Question: Does the patient have Cardiomegaly?"));
        assert!(!text.contains("<findings>"));
        assert!(!text.contains("<condition>"));
    }

    #[test]
    fn empty_observations_leave_empty_findings_block() {
        let conv = build_diagnosis_prompt(&[], "Edema", DEFAULT_DIAGNOSIS_TEMPLATE);
        let text = &conv.turns()[0].1;
        assert!(text.contains("Here are the findings:\n\n"));
        assert!(text.contains("Does the patient have Edema?"));
    }

    fn opts() -> DiagnosisOptions {
        DiagnosisOptions {
            temperature: 0.0,
            max_tokens: 512,
            max_retries: 3,
            template: DEFAULT_DIAGNOSIS_TEMPLATE.to_string(),
        }
    }

    #[test]
    fn scripted_yes_reply_gives_positive_prediction() {
        let mock = MockBackend::new(
            vec![ScriptRule::substring(
                "Does the patient have Cardiomegaly?",
                "The dominant finding is positive. Therefore, my answer is: yes.",
            )],
            "",
        )
        .unwrap();
        let result = run_diagnosis(&mock, &observations(), "Cardiomegaly", &opts()).unwrap();
        assert!(result.prediction);
        assert!(!result.fallback);
        assert_eq!(result.parse_attempts, 1);
        assert_eq!(result.reasoning, "The dominant finding is positive.");
    }

    #[test]
    fn nonconforming_replies_fall_back_to_negative() {
        let mock = MockBackend::new(vec![], "I refuse to use the format.").unwrap();
        let result = run_diagnosis(&mock, &observations(), "Cardiomegaly", &opts()).unwrap();
        assert!(!result.prediction);
        assert!(result.fallback);
        assert_eq!(result.parse_attempts, 3);
        assert_eq!(result.reasoning, "I refuse to use the format.");
    }

    #[test]
    fn retry_reminder_recovers_a_late_conforming_reply() {
        let mock = MockBackend::new(
            vec![
                ScriptRule::substring(
                    RETRY_REMINDER,
                    "Fine. Therefore, my answer is: no.",
                ),
                ScriptRule::substring("Does the patient have", "free-form rambling"),
            ],
            "",
        )
        .unwrap();
        let result = run_diagnosis(&mock, &[], "Edema", &opts()).unwrap();
        assert!(!result.prediction);
        assert!(!result.fallback);
        assert_eq!(result.parse_attempts, 2);
    }

    #[test]
    fn empty_observations_pass_through_scripted_no() {
        let mock = MockBackend::new(
            vec![ScriptRule::substring(
                "Does the patient have",
                "No findings at all. Therefore, my answer is: no.",
            )],
            "",
        )
        .unwrap();
        let result = run_diagnosis(&mock, &[], "Edema", &opts()).unwrap();
        assert!(!result.prediction);
    }
}
