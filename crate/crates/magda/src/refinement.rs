//! Refinement agent: cross-checks positive diagnoses for consistency,
//! interrogates every condition, applies the No-Finding rule, and selects a
//! single label when configured.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnosis::{parse_answer, DiagnosisError, DiagnosisResult};
use crate::llm::{Conversation, LlmBackend, LlmError, Role, SamplingParams};

pub const DEFAULT_REFINEMENT_TEMPLATE: &str = include_str!("templates/refinement.txt");

const RETRY_REMINDER: &str = "Please answer again and end your reasoning with one of these exact \
sentences: \"Therefore, my answer is: yes.\" or \"Therefore, my answer is: no.\"";

#[derive(Debug, Error)]
pub enum RefinementError {
    #[error("invalid refinement config: {0}")]
    InvalidConfig(String),
    #[error("scores missing for label {0:?}")]
    MissingScore(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    MultiLabel,
    SingleLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    pub use_cot: bool,
    pub include_disease_graph: bool,
    pub graph_text: Option<String>,
    pub task_mode: TaskMode,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            use_cot: true,
            include_disease_graph: false,
            graph_text: None,
            task_mode: TaskMode::MultiLabel,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<(), RefinementError> {
        if self.include_disease_graph && self.graph_text.is_none() {
            return Err(RefinementError::InvalidConfig(
                "include_disease_graph requires graph_text".into(),
            ));
        }
        Ok(())
    }
}

/// Final per-patient predictions after refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalPrediction {
    pub labels: BTreeMap<String, bool>,
    pub single_label_choice: Option<String>,
    pub per_disease_reasoning: BTreeMap<String, String>,
}

/// A completed refinement pass: the prediction plus its audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRun {
    pub prediction: FinalPrediction,
    /// Full refinement conversation for traces.
    pub conversation: Conversation,
    pub acknowledged: bool,
    /// Labels whose answer never parsed and which inherited the diagnosis
    /// agent's value.
    pub inherited: Vec<String>,
}

pub fn build_refinement_prompt(
    positives: &[&DiagnosisResult],
    condition_list: &[String],
    cfg: &RefinementConfig,
    template: &str,
) -> Conversation {
    let mut list = condition_list.join("\n");
    if cfg.include_disease_graph {
        if let Some(graph) = &cfg.graph_text {
            list.push_str("\n\n");
            list.push_str(graph);
        }
    }
    let diagnoses = positives
        .iter()
        .map(|d| format!("Condition: {}\nReasoning: {}", d.disease, d.reasoning))
        .collect::<Vec<_>>()
        .join("\n\n");
    let filled = template
        .replace("<condition_list>", &list)
        .replace("<diagnoses>", &diagnoses);
    Conversation::user(filled)
}

#[derive(Debug, Clone)]
pub struct RefinementOptions {
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_retries: u32,
    pub template: String,
}

/// Ask the refinement agent about every condition and assemble the final
/// prediction. `scores` holds the mean screening p_positive per label, used
/// only for single-label tie-breaking.
pub fn run_refinement(
    llm: &dyn LlmBackend,
    diagnoses: &[DiagnosisResult],
    condition_list: &[String],
    scores: &HashMap<String, f64>,
    no_finding_label: Option<&str>,
    cfg: &RefinementConfig,
    opts: &RefinementOptions,
) -> Result<RefinementRun, RefinementError> {
    cfg.validate()?;
    if condition_list.is_empty() {
        return Err(RefinementError::InvalidConfig("empty condition list".into()));
    }
    for label in condition_list {
        if !scores.contains_key(label) {
            return Err(RefinementError::MissingScore(label.clone()));
        }
    }
    let prior: HashMap<&str, &DiagnosisResult> =
        diagnoses.iter().map(|d| (d.disease.as_str(), d)).collect();
    let positives: Vec<&DiagnosisResult> = diagnoses.iter().filter(|d| d.prediction).collect();

    let mut conv = build_refinement_prompt(&positives, condition_list, cfg, &opts.template);
    let params = SamplingParams::new(opts.temperature, opts.max_tokens, vec![])?;

    // Opening exchange: the template asks for a bare acknowledgment.
    let ack = llm.generate(&conv, &params)?;
    let acknowledged = ack.text.to_lowercase().contains("ok");
    conv.push(Role::Assistant, ack.text)?;

    let is_no_finding =
        |label: &str| no_finding_label.is_some_and(|nf| nf.eq_ignore_ascii_case(label));

    let mut labels = BTreeMap::new();
    let mut reasonings = BTreeMap::new();
    let mut inherited = Vec::new();
    for condition in condition_list {
        if is_no_finding(condition) {
            continue; // computed by rule below
        }
        let question = if cfg.use_cot {
            format!("Does the patient have {condition}?")
        } else {
            format!(
                "Does the patient have {condition}? Do not provide reasoning; reply with the \
                 exact answer sentence only."
            )
        };
        conv.push(Role::User, question)?;

        let attempts = opts.max_retries.max(1);
        let mut parsed = None;
        for attempt in 1..=attempts {
            let completion = llm.generate(&conv, &params)?;
            conv.push(Role::Assistant, completion.text.clone())?;
            match parse_answer(&completion.text) {
                Ok(answer) => {
                    parsed = Some(answer);
                    break;
                }
                Err(DiagnosisError::AnswerNotFound) => {
                    if attempt < attempts {
                        conv.push(Role::User, RETRY_REMINDER)?;
                    }
                }
                Err(DiagnosisError::Llm(e)) => return Err(e.into()),
            }
        }
        match parsed {
            Some((prediction, reasoning)) => {
                labels.insert(condition.clone(), prediction);
                reasonings.insert(condition.clone(), reasoning);
            }
            None => {
                // Unparseable: the label keeps its pre-refinement value.
                let prior_result = prior.get(condition.as_str());
                labels.insert(
                    condition.clone(),
                    prior_result.is_some_and(|d| d.prediction),
                );
                reasonings.insert(
                    condition.clone(),
                    prior_result.map(|d| d.reasoning.clone()).unwrap_or_default(),
                );
                inherited.push(condition.clone());
            }
        }
    }

    // No-Finding rule: the absence class is the AND of the negations of every
    // other label, regardless of what the agent said.
    if let Some(nf) = no_finding_label {
        if condition_list.iter().any(|c| is_no_finding(c)) {
            let all_negative = labels.values().all(|&v| !v);
            labels.insert(nf.to_string(), all_negative);
        }
    }

    let single_label_choice = match cfg.task_mode {
        TaskMode::MultiLabel => None,
        TaskMode::SingleLabel => {
            let approved: Vec<String> = condition_list
                .iter()
                .filter(|c| !is_no_finding(c) && labels.get(*c).copied().unwrap_or(false))
                .cloned()
                .collect();
            let choice =
                select_single_label(&approved, scores, no_finding_label, condition_list);
            for (label, value) in labels.iter_mut() {
                *value = label.eq_ignore_ascii_case(&choice);
            }
            labels.insert(choice.clone(), true);
            Some(choice)
        }
    };

    Ok(RefinementRun {
        prediction: FinalPrediction {
            labels,
            single_label_choice,
            per_disease_reasoning: reasonings,
        },
        conversation: conv,
        acknowledged,
        inherited,
    })
}

/// Reduce an approval set to exactly one label. Ties break by condition-list
/// order; an empty approval set falls back to the no-finding label, or the
/// globally highest-scoring condition when there is none.
pub fn select_single_label(
    approved: &[String],
    scores: &HashMap<String, f64>,
    no_finding_label: Option<&str>,
    condition_list: &[String],
) -> String {
    let best_of = |candidates: &mut dyn Iterator<Item = &String>| -> Option<String> {
        let mut best: Option<(&String, f64)> = None;
        for label in candidates {
            let score = scores.get(label).copied().unwrap_or(0.0);
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((label, score));
            }
        }
        best.map(|(l, _)| l.clone())
    };

    match approved.len() {
        1 => approved[0].clone(),
        0 => no_finding_label.map(str::to_string).unwrap_or_else(|| {
            best_of(&mut condition_list.iter()).expect("condition list is non-empty")
        }),
        _ => {
            // Iterate in condition-list order so strict > keeps the earliest
            // label on ties.
            let mut ordered = condition_list
                .iter()
                .filter(|c| approved.iter().any(|a| a == *c));
            best_of(&mut ordered).expect("approved labels appear in condition list")
        }
    }
}
