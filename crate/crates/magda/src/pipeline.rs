//! Orchestration of screening -> diagnosis -> refinement per patient over a
//! dataset manifest, with parallelism, trace persistence, and resume.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnosis::{run_diagnosis, DiagnosisError, DiagnosisOptions, DiagnosisResult};
use crate::embedding::{EmbeddingBackend, EmbeddingError, VlmConfig};
use crate::guidelines::GuidelineSet;
use crate::llm::{Conversation, LlmBackend, LlmError};
use crate::refinement::{
    run_refinement, FinalPrediction, RefinementConfig, RefinementError, RefinementOptions,
};
use crate::screening::{
    build_screening_prompt, run_screening, NegationMode, ScreeningError, ScreeningOptions,
    ScreeningTranscript,
};
use crate::trace::{RecordKind, TraceError, TraceFile, TraceWriter};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("guidelines cover no disease for manifest label {0:?}")]
    MissingGuideline(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("resume fingerprint mismatch: trace has {found}, config is {expected}")]
    ResumeMismatch { found: String, expected: String },
    #[error("llm backend failure: {0}")]
    Llm(#[from] LlmError),
    #[error("embedding backend failure: {0}")]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Refinement(#[from] RefinementError),
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub image_ref: String,
    /// Ground truth per label; None = unlabeled cell, excluded from metrics.
    pub true_labels: BTreeMap<String, Option<bool>>,
}

/// Parse the dataset manifest CSV: patient_id, image_ref, then one column per
/// label with values in {0, 1, empty}. Column order defines condition order.
pub fn load_manifest(
    path: impl AsRef<Path>,
) -> Result<(Vec<PatientRecord>, Vec<String>), PipelineError> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| PipelineError::Manifest(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| PipelineError::Manifest(e.to_string()))?
        .clone();
    let mut columns = headers.iter();
    if columns.next() != Some("patient_id") || columns.next() != Some("image_ref") {
        return Err(PipelineError::Manifest(
            "manifest must start with columns patient_id, image_ref".into(),
        ));
    }
    let labels: Vec<String> = columns.map(str::to_string).collect();
    if labels.is_empty() {
        return Err(PipelineError::Manifest("manifest has no label columns".into()));
    }

    let mut patients = Vec::new();
    let mut seen = HashSet::new();
    for (row_idx, row) in reader.records().enumerate() {
        let row = row.map_err(|e| PipelineError::Manifest(e.to_string()))?;
        if row.len() != labels.len() + 2 {
            return Err(PipelineError::Manifest(format!(
                "row {}: expected {} fields, got {}",
                row_idx + 2,
                labels.len() + 2,
                row.len()
            )));
        }
        let id = row[0].to_string();
        if !seen.insert(id.to_lowercase()) {
            return Err(PipelineError::Manifest(format!("duplicate patient id {id:?}")));
        }
        let mut true_labels = BTreeMap::new();
        for (label, cell) in labels.iter().zip(row.iter().skip(2)) {
            let value = match cell {
                "" => None,
                "0" => Some(false),
                "1" => Some(true),
                other => {
                    return Err(PipelineError::Manifest(format!(
                        "row {}: label {label:?} has value {other:?}, expected 0, 1 or empty",
                        row_idx + 2
                    )))
                }
            };
            true_labels.insert(label.clone(), value);
        }
        patients.push(PatientRecord {
            id,
            image_ref: row[1].to_string(),
            true_labels,
        });
    }
    Ok((patients, labels))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub screening_ms: u64,
    pub diagnosis_ms: u64,
    pub refinement_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiseaseOutcome {
    pub disease: String,
    pub screening: ScreeningTranscript,
    /// Set when screening aborted and the partial transcript was kept.
    pub screening_failed: bool,
    pub diagnosis: DiagnosisResult,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinementSummary {
    pub acknowledged: bool,
    pub inherited: Vec<String>,
    pub conversation: Option<Conversation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientResult {
    pub patient_id: String,
    pub image_ref: String,
    pub true_labels: BTreeMap<String, Option<bool>>,
    pub per_disease: Vec<DiseaseOutcome>,
    pub final_prediction: FinalPrediction,
    pub refinement: RefinementSummary,
    pub timing: StageTiming,
}

pub type ResultSet = Vec<PatientResult>;

#[derive(Debug, Clone)]
pub struct EngineOptions {
    pub vlm: VlmConfig,
    pub negation_mode: NegationMode,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_retries: u32,
    pub refinement: RefinementConfig,
    pub screening_template: String,
    pub diagnosis_template: String,
    pub refinement_template: String,
    pub parallelism: usize,
}

pub struct Engine {
    pub llm: Arc<dyn LlmBackend>,
    pub embedder: Arc<dyn EmbeddingBackend>,
    pub guidelines: GuidelineSet,
    pub options: EngineOptions,
}

/// Outcome of a dataset run: results in manifest order plus per-patient
/// failures that did not stop the run.
#[derive(Debug)]
pub struct RunOutcome {
    pub results: ResultSet,
    pub failures: Vec<(String, String)>,
    pub labels: Vec<String>,
    pub resumed: usize,
}

impl Engine {
    fn screening_options(&self) -> ScreeningOptions {
        ScreeningOptions {
            vlm: self.options.vlm,
            negation_mode: self.options.negation_mode,
            temperature: self.options.temperature,
            max_tokens: self.options.max_tokens,
            max_tool_calls: None,
            template: self.options.screening_template.clone(),
        }
    }

    fn diagnosis_options(&self) -> DiagnosisOptions {
        DiagnosisOptions {
            temperature: self.options.temperature,
            max_tokens: self.options.max_tokens,
            max_retries: self.options.max_retries,
            template: self.options.diagnosis_template.clone(),
        }
    }

    fn refinement_options(&self) -> RefinementOptions {
        RefinementOptions {
            temperature: self.options.temperature,
            max_tokens: self.options.max_tokens,
            max_retries: self.options.max_retries,
            template: self.options.refinement_template.clone(),
        }
    }

    /// Check that every manifest label except the no-finding one has a
    /// guideline entry.
    pub fn check_labels(&self, labels: &[String]) -> Result<(), PipelineError> {
        for label in labels {
            let is_no_finding = self
                .guidelines
                .no_finding_label()
                .is_some_and(|nf| nf.eq_ignore_ascii_case(label));
            if !is_no_finding && self.guidelines.disease(label).is_none() {
                return Err(PipelineError::MissingGuideline(label.clone()));
            }
        }
        Ok(())
    }

    /// Run all three agents for one patient.
    pub fn diagnose_patient(
        &self,
        patient: &PatientRecord,
        condition_list: &[String],
        trace: Option<&TraceWriter>,
    ) -> Result<PatientResult, PipelineError> {
        let write = |kind: RecordKind, disease: Option<&str>, payload: serde_json::Value| {
            if let Some(writer) = trace {
                let _ = writer.write(kind, Some(&patient.id), disease, payload);
            }
        };

        let mut per_disease = Vec::new();
        let mut timing = StageTiming::default();
        let mut scores: HashMap<String, f64> = HashMap::new();

        for disease in self.guidelines.diseases() {
            let name = disease.name();
            let screening_opts = self.screening_options();
            write(
                RecordKind::Prompt,
                Some(name),
                serde_json::json!({
                    "stage": "screening",
                    "text": build_screening_prompt(disease, &screening_opts.template).render(),
                }),
            );
            let started = Instant::now();
            let (transcript, screening_failed) = match run_screening(
                self.llm.as_ref(),
                self.embedder.as_ref(),
                &patient.image_ref,
                disease,
                &screening_opts,
            ) {
                Ok(t) => (t, false),
                Err(ScreeningError::Failed { transcript, .. }) => (*transcript, true),
                Err(ScreeningError::Llm(e)) => return Err(e.into()),
                Err(ScreeningError::Embedding(e)) => return Err(e.into()),
            };
            timing.screening_ms += started.elapsed().as_millis() as u64;

            for obs in &transcript.observations {
                write(
                    RecordKind::ToolCall,
                    Some(name),
                    serde_json::json!({
                        "positive": obs.probe.positive(),
                        "negative": obs.probe.negative(),
                    }),
                );
                write(
                    RecordKind::ToolResult,
                    Some(name),
                    serde_json::json!({
                        "verdict": obs.verdict.to_string(),
                        "p_positive": obs.p_positive,
                        "s_pos": obs.s_pos,
                        "s_neg": obs.s_neg,
                    }),
                );
            }
            for failure in &transcript.parse_failures {
                write(
                    RecordKind::ParseEvent,
                    Some(name),
                    serde_json::json!({
                        "stage": "screening",
                        "kind": failure.kind,
                        "segment": failure.segment,
                    }),
                );
            }
            write(
                RecordKind::StageResult,
                Some(name),
                serde_json::json!({
                    "stage": "screening",
                    "observations": transcript.observations.len(),
                    "failed": screening_failed,
                }),
            );

            let mean_p = if transcript.observations.is_empty() {
                0.0
            } else {
                transcript
                    .observations
                    .iter()
                    .map(|o| o.p_positive)
                    .sum::<f64>()
                    / transcript.observations.len() as f64
            };
            scores.insert(name.to_string(), mean_p);

            let started = Instant::now();
            let diagnosis = match run_diagnosis(
                self.llm.as_ref(),
                &transcript.observations,
                name,
                &self.diagnosis_options(),
            ) {
                Ok(d) => d,
                Err(DiagnosisError::Llm(e)) => return Err(e.into()),
                Err(DiagnosisError::AnswerNotFound) => unreachable!("handled by fallback"),
            };
            timing.diagnosis_ms += started.elapsed().as_millis() as u64;
            write(
                RecordKind::Completion,
                Some(name),
                serde_json::json!({
                    "stage": "diagnosis",
                    "prediction": diagnosis.prediction,
                    "reasoning": diagnosis.reasoning,
                    "attempts": diagnosis.parse_attempts,
                    "fallback": diagnosis.fallback,
                }),
            );
            if diagnosis.fallback {
                write(
                    RecordKind::ParseEvent,
                    Some(name),
                    serde_json::json!({ "stage": "diagnosis", "kind": "answer_not_found" }),
                );
            }
            write(
                RecordKind::StageResult,
                Some(name),
                serde_json::json!({ "stage": "diagnosis", "prediction": diagnosis.prediction }),
            );

            per_disease.push(DiseaseOutcome {
                disease: name.to_string(),
                screening: transcript,
                screening_failed,
                diagnosis,
            });
        }

        for label in condition_list {
            scores.entry(label.clone()).or_insert(0.0);
        }
        let diagnoses: Vec<DiagnosisResult> =
            per_disease.iter().map(|o| o.diagnosis.clone()).collect();

        let started = Instant::now();
        let refinement = run_refinement(
            self.llm.as_ref(),
            &diagnoses,
            condition_list,
            &scores,
            self.guidelines.no_finding_label(),
            &self.options.refinement,
            &self.refinement_options(),
        )?;
        timing.refinement_ms = started.elapsed().as_millis() as u64;
        write(
            RecordKind::StageResult,
            None,
            serde_json::json!({
                "stage": "refinement",
                "acknowledged": refinement.acknowledged,
                "inherited": refinement.inherited,
                "labels": refinement.prediction.labels,
            }),
        );

        Ok(PatientResult {
            patient_id: patient.id.clone(),
            image_ref: patient.image_ref.clone(),
            true_labels: patient.true_labels.clone(),
            per_disease,
            final_prediction: refinement.prediction,
            refinement: RefinementSummary {
                acknowledged: refinement.acknowledged,
                inherited: refinement.inherited,
                conversation: Some(refinement.conversation),
            },
            timing,
        })
    }

    /// Process a manifest with bounded parallelism. Result order equals
    /// manifest order regardless of completion order.
    pub fn run_dataset(
        &self,
        manifest_path: impl AsRef<Path>,
        trace_path: impl AsRef<Path>,
        config_fingerprint: &str,
        resume: bool,
    ) -> Result<RunOutcome, PipelineError> {
        let (patients, labels) = load_manifest(manifest_path)?;
        self.check_labels(&labels)?;

        let mut completed = BTreeMap::new();
        let trace_path = trace_path.as_ref();
        let writer = if resume && trace_path.exists() {
            let existing = TraceFile::read(trace_path)?;
            let found = existing.header_fingerprint()?;
            if found != config_fingerprint {
                return Err(PipelineError::ResumeMismatch {
                    found,
                    expected: config_fingerprint.to_string(),
                });
            }
            completed = existing.completed_patients();
            TraceWriter::append(trace_path, existing.next_seq())?
        } else {
            let writer = TraceWriter::create(trace_path)?;
            writer.write_header(config_fingerprint)?;
            writer
        };
        let resumed = completed.len();

        let slots: Vec<Mutex<Option<Result<PatientResult, String>>>> =
            patients.iter().map(|_| Mutex::new(None)).collect();
        let queue: Mutex<VecDeque<usize>> = Mutex::new(
            patients
                .iter()
                .enumerate()
                .filter(|(_, p)| !completed.contains_key(&p.id))
                .map(|(i, _)| i)
                .collect(),
        );

        let workers = self.options.parallelism.max(1).min(patients.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let index = match queue.lock().unwrap().pop_front() {
                        Some(i) => i,
                        None => break,
                    };
                    let patient = &patients[index];
                    let outcome = self
                        .diagnose_patient(patient, &labels, Some(&writer))
                        .map_err(|e| e.to_string());
                    if let Ok(result) = &outcome {
                        let _ = writer.write(
                            RecordKind::PatientResult,
                            Some(&patient.id),
                            None,
                            serde_json::to_value(result).expect("result serializes"),
                        );
                    }
                    *slots[index].lock().unwrap() = Some(outcome);
                });
            }
        });

        let mut results = Vec::new();
        let mut failures = Vec::new();
        for (index, patient) in patients.iter().enumerate() {
            if let Some(prior) = completed.get(&patient.id) {
                results.push(prior.clone());
                continue;
            }
            match slots[index].lock().unwrap().take() {
                Some(Ok(result)) => results.push(result),
                Some(Err(reason)) => failures.push((patient.id.clone(), reason)),
                None => failures.push((patient.id.clone(), "not processed".into())),
            }
        }
        Ok(RunOutcome {
            results,
            failures,
            labels,
            resumed,
        })
    }
}

/// Construction helpers for tests and oracle harnesses.
#[doc(hidden)]
pub mod test_support {
    use super::*;

    /// Build a bare PatientResult with the given truth and final labels.
    pub fn result_with(
        id: &str,
        truth: &[(&str, Option<bool>)],
        predictions: &[(&str, bool)],
    ) -> PatientResult {
        PatientResult {
            patient_id: id.to_string(),
            image_ref: format!("img-{id}"),
            true_labels: truth
                .iter()
                .map(|(l, v)| (l.to_string(), *v))
                .collect(),
            per_disease: Vec::new(),
            final_prediction: FinalPrediction {
                labels: predictions
                    .iter()
                    .map(|(l, v)| (l.to_string(), *v))
                    .collect(),
                single_label_choice: None,
                per_disease_reasoning: BTreeMap::new(),
            },
            refinement: RefinementSummary::default(),
            timing: StageTiming::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_manifest(body: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        (dir, path)
    }

    #[test]
    fn parses_manifest_with_empty_cells() {
        let (_dir, path) = write_manifest(
            "patient_id,image_ref,Edema,No Finding\np1,img1,1,0\np2,img2,,1\n",
        );
        let (patients, labels) = load_manifest(&path).unwrap();
        assert_eq!(labels, vec!["Edema".to_string(), "No Finding".to_string()]);
        assert_eq!(patients.len(), 2);
        assert_eq!(patients[0].true_labels["Edema"], Some(true));
        assert_eq!(patients[1].true_labels["Edema"], None);
        assert_eq!(patients[1].true_labels["No Finding"], Some(true));
    }

    #[test]
    fn duplicate_patient_id_rejected() {
        let (_dir, path) =
            write_manifest("patient_id,image_ref,A\np1,img1,1\np1,img2,0\n");
        assert!(matches!(
            load_manifest(&path),
            Err(PipelineError::Manifest(_))
        ));
    }

    #[test]
    fn bad_label_value_rejected() {
        let (_dir, path) = write_manifest("patient_id,image_ref,A\np1,img1,2\n");
        assert!(matches!(
            load_manifest(&path),
            Err(PipelineError::Manifest(_))
        ));
    }

    #[test]
    fn header_must_start_with_id_and_image() {
        let (_dir, path) = write_manifest("id,image,A\np1,img1,1\n");
        assert!(matches!(
            load_manifest(&path),
            Err(PipelineError::Manifest(_))
        ));
    }
}
