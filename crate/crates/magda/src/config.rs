//! Run configuration: TOML document mirroring the pipeline knobs, dotted-key
//! overrides, validation, and the semantic fingerprint used for resume and
//! ablation guards.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::NegationScoring;
use crate::refinement::TaskMode;
use crate::screening::NegationMode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config error at {key}: {reason}")]
    Invalid { key: String, reason: String },
    #[error("bad override {0:?}: expected key=value with a dotted key")]
    BadOverride(String),
}

fn default_psi() -> f64 {
    0.55
}
fn default_temperature() -> f64 {
    0.8
}
fn default_negation_mode() -> NegationMode {
    NegationMode::Llm
}
fn default_scoring() -> NegationScoring {
    NegationScoring::Contrastive
}
fn default_task_mode() -> TaskMode {
    TaskMode::MultiLabel
}
fn default_max_retries() -> u32 {
    3
}
fn default_parallelism() -> usize {
    1
}
fn default_max_tokens() -> u32 {
    1024
}
fn default_true() -> bool {
    true
}
fn default_embedding_dim() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub psi: f64,
    pub temperature: f64,
    pub negation_mode: NegationMode,
    pub scoring: NegationScoring,
    pub task_mode: TaskMode,
    pub max_retries: u32,
    pub parallelism: usize,
    pub max_tokens: u32,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            psi: default_psi(),
            temperature: default_temperature(),
            negation_mode: default_negation_mode(),
            scoring: default_scoring(),
            task_mode: default_task_mode(),
            max_retries: default_max_retries(),
            parallelism: default_parallelism(),
            max_tokens: default_max_tokens(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidelinesSection {
    pub path: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub manifest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmSection {
    pub kind: LlmKind,
    pub script: String,
    pub base_url: String,
    pub model: String,
}

impl Default for LlmSection {
    fn default() -> Self {
        Self {
            kind: LlmKind::Mock,
            script: String::new(),
            base_url: String::new(),
            model: String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Synthetic,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSection {
    pub kind: EmbeddingKind,
    pub world: String,
    pub base_url: String,
    pub dim: usize,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            kind: EmbeddingKind::Synthetic,
            world: String::new(),
            base_url: String::new(),
            dim: default_embedding_dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinementSection {
    pub use_cot: bool,
    pub include_disease_graph: bool,
    pub graph_text_path: String,
}

impl Default for RefinementSection {
    fn default() -> Self {
        Self {
            use_cot: default_true(),
            include_disease_graph: false,
            graph_text_path: String::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceSection {
    pub path: String,
    pub metrics_path: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplatesSection {
    pub screening: String,
    pub diagnosis: String,
    pub refinement: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub tail_labels: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub run: RunSection,
    pub guidelines: GuidelinesSection,
    pub dataset: DatasetSection,
    pub llm: LlmSection,
    pub embedding: EmbeddingSection,
    pub refinement: RefinementSection,
    pub trace: TraceSection,
    pub templates: TemplatesSection,
    pub eval: EvalSection,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::load_with_overrides(path, &[])
    }

    pub fn load_with_overrides(
        path: impl AsRef<Path>,
        overrides: &[String],
    ) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut value: toml::Value =
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for pair in overrides {
            apply_override(&mut value, pair)?;
        }
        // deny_unknown_fields turns unknown dotted keys into hard errors here.
        let mut config: Config =
            value.try_into().map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(config)
    }

    /// Resolve a config-relative path.
    pub fn resolve(&self, p: &str) -> PathBuf {
        let path = Path::new(p);
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, reason: String| ConfigError::Invalid {
            key: key.to_string(),
            reason,
        };
        if !(self.run.psi > 0.0 && self.run.psi < 1.0) {
            return Err(invalid("run.psi", format!("{} outside (0, 1)", self.run.psi)));
        }
        if !(0.0..=2.0).contains(&self.run.temperature) {
            return Err(invalid(
                "run.temperature",
                format!("{} outside [0, 2]", self.run.temperature),
            ));
        }
        if self.run.parallelism == 0 {
            return Err(invalid("run.parallelism", "must be positive".into()));
        }
        if self.guidelines.path.is_empty() {
            return Err(invalid("guidelines.path", "missing".into()));
        }
        if self.dataset.manifest.is_empty() {
            return Err(invalid("dataset.manifest", "missing".into()));
        }
        match self.llm.kind {
            LlmKind::Mock if self.llm.script.is_empty() => {
                return Err(invalid("llm.script", "missing for mock backend".into()));
            }
            LlmKind::Http if self.llm.base_url.is_empty() => {
                return Err(invalid("llm.base_url", "missing for http backend".into()));
            }
            _ => {}
        }
        match self.embedding.kind {
            EmbeddingKind::Synthetic if self.embedding.world.is_empty() => {
                return Err(invalid(
                    "embedding.world",
                    "missing for synthetic backend".into(),
                ));
            }
            EmbeddingKind::Http if self.embedding.base_url.is_empty() => {
                return Err(invalid(
                    "embedding.base_url",
                    "missing for http backend".into(),
                ));
            }
            _ => {}
        }
        if self.refinement.include_disease_graph && self.refinement.graph_text_path.is_empty() {
            return Err(invalid(
                "refinement.graph_text_path",
                "required when include_disease_graph = true".into(),
            ));
        }
        if self.trace.path.is_empty() {
            return Err(invalid("trace.path", "missing".into()));
        }
        Ok(())
    }

    fn read_optional(&self, p: &str, key: &str) -> Result<Option<String>, ConfigError> {
        if p.is_empty() {
            return Ok(None);
        }
        fs::read_to_string(self.resolve(p))
            .map(Some)
            .map_err(|e| ConfigError::Invalid {
                key: key.to_string(),
                reason: e.to_string(),
            })
    }

    pub fn screening_template(&self) -> Result<String, ConfigError> {
        Ok(self
            .read_optional(&self.templates.screening, "templates.screening")?
            .unwrap_or_else(|| crate::screening::DEFAULT_SCREENING_TEMPLATE.to_string()))
    }

    pub fn diagnosis_template(&self) -> Result<String, ConfigError> {
        Ok(self
            .read_optional(&self.templates.diagnosis, "templates.diagnosis")?
            .unwrap_or_else(|| crate::diagnosis::DEFAULT_DIAGNOSIS_TEMPLATE.to_string()))
    }

    pub fn refinement_template(&self) -> Result<String, ConfigError> {
        Ok(self
            .read_optional(&self.templates.refinement, "templates.refinement")?
            .unwrap_or_else(|| crate::refinement::DEFAULT_REFINEMENT_TEMPLATE.to_string()))
    }

    pub fn graph_text(&self) -> Result<Option<String>, ConfigError> {
        self.read_optional(&self.refinement.graph_text_path, "refinement.graph_text_path")
    }

    /// Hash of every semantically meaningful field: the knobs, the input
    /// documents' paths, and the resolved template/graph texts. Parallelism
    /// and output paths are excluded.
    pub fn fingerprint(&self) -> Result<String, ConfigError> {
        self.fingerprint_inner(false)
    }

    /// Fingerprint with the ablation axes (negation mode, CoT, disease graph)
    /// normalized away, used to guard apples-to-oranges ablation runs.
    pub fn fingerprint_excluding_ablation_axes(&self) -> Result<String, ConfigError> {
        self.fingerprint_inner(true)
    }

    fn fingerprint_inner(&self, normalize_ablation: bool) -> Result<String, ConfigError> {
        let mut semantic = self.clone();
        semantic.base_dir = PathBuf::new();
        semantic.run.parallelism = 0;
        semantic.trace = TraceSection::default();
        if normalize_ablation {
            semantic.run.negation_mode = NegationMode::Llm;
            semantic.refinement.use_cot = true;
            semantic.refinement.include_disease_graph = false;
            semantic.refinement.graph_text_path = String::new();
        }
        let view = serde_json::json!({
            "config": semantic,
            "templates": {
                "screening": self.screening_template()?,
                "diagnosis": self.diagnosis_template()?,
                "refinement": self.refinement_template()?,
            },
            "graph_text": if normalize_ablation { None } else { self.graph_text()? },
        });
        let bytes = serde_json::to_vec(&view).expect("config serializes");
        Ok(hex::encode(Sha256::digest(bytes)))
    }

    pub fn ablation_key(&self) -> (NegationMode, bool, bool) {
        (
            self.run.negation_mode,
            self.refinement.use_cot,
            self.refinement.include_disease_graph,
        )
    }
}

fn apply_override(root: &mut toml::Value, pair: &str) -> Result<(), ConfigError> {
    let (key, raw_value) = pair
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(pair.to_string()))?;
    let key = key.trim();
    let segments: Vec<&str> = key.split('.').collect();
    if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(ConfigError::BadOverride(pair.to_string()));
    }
    let parsed: toml::Value = toml::from_str(&format!("v = {}", raw_value.trim()))
        .ok()
        .and_then(|t: toml::Value| t.get("v").cloned())
        .unwrap_or_else(|| toml::Value::String(raw_value.trim().to_string()));

    let mut current = root;
    for segment in &segments[..segments.len() - 1] {
        let table = current
            .as_table_mut()
            .ok_or_else(|| ConfigError::BadOverride(pair.to_string()))?;
        current = table
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = current
        .as_table_mut()
        .ok_or_else(|| ConfigError::BadOverride(pair.to_string()))?;
    table.insert(segments[segments.len() - 1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_config(body: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        (dir, path)
    }

    const MINIMAL: &str = r#"
[guidelines]
path = "guidelines.json"
[dataset]
manifest = "manifest.csv"
[llm]
kind = "mock"
script = "script.json"
[embedding]
kind = "synthetic"
world = "world.json"
[trace]
path = "trace.jsonl"
"#;

    #[test]
    fn defaults_match_stated_values() {
        let (_dir, path) = write_config(MINIMAL);
        let cfg = Config::load(&path).unwrap();
        assert_eq!(cfg.run.psi, 0.55);
        assert_eq!(cfg.run.temperature, 0.8);
        assert_eq!(cfg.run.negation_mode, NegationMode::Llm);
        assert_eq!(cfg.run.task_mode, TaskMode::MultiLabel);
        assert_eq!(cfg.run.max_retries, 3);
        assert!(cfg.refinement.use_cot);
        assert!(!cfg.refinement.include_disease_graph);
        cfg.validate().unwrap();
    }

    #[test]
    fn overrides_apply_with_type_inference() {
        let (_dir, path) = write_config(MINIMAL);
        let cfg = Config::load_with_overrides(
            &path,
            &[
                "run.psi=0.5".to_string(),
                "run.negation_mode=naive".to_string(),
                "eval.tail_labels=[\"X\"]".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.run.psi, 0.5);
        assert_eq!(cfg.run.negation_mode, NegationMode::Naive);
        assert_eq!(cfg.eval.tail_labels, vec!["X".to_string()]);
    }

    #[test]
    fn unknown_dotted_keys_are_rejected() {
        let (_dir, path) = write_config(MINIMAL);
        assert!(matches!(
            Config::load_with_overrides(&path, &["run.psy=0.5".to_string()]),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn missing_guideline_path_named_in_error() {
        let (_dir, path) = write_config(
            r#"
[dataset]
manifest = "m.csv"
[llm]
script = "s.json"
[embedding]
world = "w.json"
[trace]
path = "t.jsonl"
"#,
        );
        let cfg = Config::load(&path).unwrap();
        match cfg.validate().unwrap_err() {
            ConfigError::Invalid { key, .. } => assert_eq!(key, "guidelines.path"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fingerprint_tracks_psi_and_ignores_parallelism() {
        let (_dir, path) = write_config(MINIMAL);
        let base = Config::load(&path).unwrap().fingerprint().unwrap();
        let psi = Config::load_with_overrides(&path, &["run.psi=0.5".to_string()])
            .unwrap()
            .fingerprint()
            .unwrap();
        let par = Config::load_with_overrides(&path, &["run.parallelism=4".to_string()])
            .unwrap()
            .fingerprint()
            .unwrap();
        assert_ne!(base, psi);
        assert_eq!(base, par);
    }

    #[test]
    fn ablation_normalized_fingerprint_hides_axes_only() {
        let (_dir, path) = write_config(MINIMAL);
        let a = Config::load(&path).unwrap();
        let b = Config::load_with_overrides(&path, &["run.negation_mode=naive".to_string()])
            .unwrap();
        let c = Config::load_with_overrides(&path, &["run.psi=0.4".to_string()]).unwrap();
        assert_eq!(
            a.fingerprint_excluding_ablation_axes().unwrap(),
            b.fingerprint_excluding_ablation_axes().unwrap()
        );
        assert_ne!(
            a.fingerprint_excluding_ablation_axes().unwrap(),
            c.fingerprint_excluding_ablation_axes().unwrap()
        );
    }
}
