//! Bundled synthetic oracle fixture: a 10-image x 8-finding world, matching
//! guidelines, manifests, and a scripted agent that faithfully screens,
//! diagnoses, and refines. Over this world the pipeline's correct output is
//! exactly decidable, which is what the end-to-end tests check against.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use regex::escape;

use crate::embedding::{SyntheticImage, SyntheticWorld};
use crate::guidelines::{parse_guidelines, GuidelineSet};
use crate::llm::ScriptRule;

pub const NO_FINDING_LABEL: &str = "No Finding";

/// (disease, [finding tokens]) — tokens double as the embedding vocabulary.
pub const DISEASES: [(&str, [&str; 2]); 4] = [
    (
        "Pleural Effusion",
        ["blunted costophrenic angle", "layering pleural fluid"],
    ),
    (
        "Cardiomegaly",
        [
            "enlarged cardiac silhouette",
            "cephalization of pulmonary vessels",
        ],
    ),
    (
        "Pneumonia",
        ["focal airspace consolidation", "air bronchograms"],
    ),
    (
        "Pneumothorax",
        [
            "visible visceral pleural edge",
            "absent peripheral lung markings",
        ],
    ),
];

/// Image id -> finding-token indices into the flattened vocabulary.
const IMAGES: [(&str, &[usize]); 10] = [
    ("img01", &[0, 1]),
    ("img02", &[2, 3]),
    ("img03", &[4, 5]),
    ("img04", &[6, 7]),
    ("img05", &[0, 1, 4, 5]),
    ("img06", &[2, 3, 6, 7]),
    ("img07", &[]),
    ("img08", &[0, 1, 2, 3]),
    ("img09", &[4, 5, 2]),
    ("img10", &[0, 1, 2, 3, 4, 5, 6, 7]),
];

pub fn vocabulary() -> Vec<String> {
    DISEASES
        .iter()
        .flat_map(|(_, tokens)| tokens.iter().map(|t| t.to_string()))
        .collect()
}

pub fn world() -> SyntheticWorld {
    let vocab = vocabulary();
    let images = IMAGES
        .iter()
        .map(|(id, indices)| SyntheticImage {
            id: id.to_string(),
            findings: indices.iter().map(|&i| vocab[i].clone()).collect(),
        })
        .collect();
    SyntheticWorld::new(vocab, images).expect("fixture world is valid")
}

pub fn guidelines() -> GuidelineSet {
    parse_guidelines(guidelines_json().as_bytes(), "fixture").expect("fixture guidelines valid")
}

pub fn guidelines_json() -> String {
    let diseases: Vec<serde_json::Value> = DISEASES
        .iter()
        .map(|(name, tokens)| {
            serde_json::json!({ "name": name, "findings": tokens.to_vec() })
        })
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({
        "no_finding_label": NO_FINDING_LABEL,
        "diseases": diseases,
    }))
    .expect("serializes")
        + "\n"
}

pub fn condition_list() -> Vec<String> {
    let mut list: Vec<String> = DISEASES.iter().map(|(d, _)| d.to_string()).collect();
    list.push(NO_FINDING_LABEL.to_string());
    list
}

/// Ground truth for an image: a disease is present iff every one of its
/// finding tokens is declared on the image.
pub fn truth_for_image(image_id: &str) -> BTreeMap<String, bool> {
    let (_, indices) = IMAGES
        .iter()
        .find(|(id, _)| *id == image_id)
        .expect("known image");
    let vocab = vocabulary();
    let present: Vec<&str> = indices.iter().map(|&i| vocab[i].as_str()).collect();
    let mut truth = BTreeMap::new();
    let mut any = false;
    for (disease, tokens) in DISEASES {
        let has = tokens.iter().all(|t| present.contains(t));
        any |= has;
        truth.insert(disease.to_string(), has);
    }
    truth.insert(NO_FINDING_LABEL.to_string(), !any);
    truth
}

fn manifest_for(patients: &[(&str, &str)]) -> String {
    let mut out = String::from("patient_id,image_ref");
    for label in condition_list() {
        out.push(',');
        out.push_str(&label);
    }
    out.push('\n');
    for (patient, image) in patients {
        let truth = truth_for_image(image);
        out.push_str(patient);
        out.push(',');
        out.push_str(image);
        for label in condition_list() {
            out.push(',');
            out.push(if truth[&label] { '1' } else { '0' });
        }
        out.push('\n');
    }
    out
}

/// All 10 images, multi-label ground truth.
pub fn manifest_multilabel_csv() -> String {
    let patients: Vec<(String, &str)> = IMAGES
        .iter()
        .enumerate()
        .map(|(i, (image, _))| (format!("p{:02}", i + 1), *image))
        .collect();
    let refs: Vec<(&str, &str)> = patients.iter().map(|(p, i)| (p.as_str(), *i)).collect();
    manifest_for(&refs)
}

/// Ten patients over the five single-disease images (exactly one true label
/// per row, counting "No Finding").
pub fn manifest_singlelabel_csv() -> String {
    let images = ["img01", "img02", "img03", "img04", "img07"];
    let patients: Vec<(String, &str)> = (0..10)
        .map(|i| (format!("s{:02}", i + 1), images[i % images.len()]))
        .collect();
    let refs: Vec<(&str, &str)> = patients.iter().map(|(p, i)| (p.as_str(), *i)).collect();
    manifest_for(&refs)
}

pub fn probe_positive(token: &str, disease: &str) -> String {
    format!("There is {token} indicating {disease}.")
}

pub fn probe_negative(disease: &str) -> String {
    format!("There is a normal appearance indicating no {disease}.")
}

/// The faithful scripted agent: screens every guideline finding in order,
/// diagnoses yes iff no finding came back negative, acknowledges the
/// refinement briefing, and approves exactly the presented positives.
pub fn agent_script() -> Vec<ScriptRule> {
    let mut rules = Vec::new();

    // Screening: per disease, [terminal, continue, initial]; the more
    // advanced conversation state must match first.
    for (disease, tokens) in DISEASES {
        let call = |token: &str| {
            format!(
                "CLIP: {} / {} ->",
                probe_positive(token, disease),
                probe_negative(disease)
            )
        };
        rules.push(ScriptRule::substring(
            format!("CLIP: {}", probe_positive(tokens[1], disease)),
            format!("\nAll findings for {disease} have been evaluated."),
        ));
        rules.push(ScriptRule::substring(
            format!("CLIP: {}", probe_positive(tokens[0], disease)),
            call(tokens[1]),
        ));
        rules.push(ScriptRule::substring(
            format!("presence or absence of {disease}"),
            call(tokens[0]),
        ));
    }

    // Diagnosis: negative findings dominate.
    for (disease, _) in DISEASES {
        let d = escape(disease);
        rules.push(ScriptRule::regex(
            format!("(?s)You are a diagnosis agent.*: Negative.*Question: Does the patient have {d}\\?"),
            format!("At least one expected finding for {disease} is absent. Therefore, my answer is: no."),
        ));
        rules.push(ScriptRule::regex(
            format!("(?s)You are a diagnosis agent.*Question: Does the patient have {d}\\?"),
            format!("All expected findings for {disease} are present. Therefore, my answer is: yes."),
        ));
    }

    // Refinement: reverse condition order so the most recent question wins.
    for (disease, _) in DISEASES.iter().rev() {
        let d = escape(disease);
        rules.push(ScriptRule::regex(
            format!("(?s)You are a medical expert.*Condition: {d}\n.*Does the patient have {d}\\?"),
            format!("The presented diagnosis of {disease} is consistent. Therefore, my answer is: yes."),
        ));
        rules.push(ScriptRule::regex(
            format!("(?s)You are a medical expert.*Does the patient have {d}\\?"),
            format!("No supporting diagnosis of {disease} was presented. Therefore, my answer is: no."),
        ));
    }
    rules.push(ScriptRule::substring("You are a medical expert", "OK."));
    rules
}

pub fn agent_script_json() -> String {
    serde_json::to_string_pretty(&agent_script()).expect("serializes") + "\n"
}

pub fn graph_text() -> String {
    "Disease dependencies: Cardiomegaly can cause Pleural Effusion. \
     Pneumonia and Pneumothorax are independent of the others.\n"
        .to_string()
}

fn config_toml(
    manifest: &str,
    out_dir: &str,
    extra_run: &str,
    extra_refinement: &str,
    extra_eval: &str,
) -> String {
    format!(
        r#"[run]
psi = 0.5
temperature = 0.0
{extra_run}
[guidelines]
path = "guidelines.json"

[dataset]
manifest = "{manifest}"

[llm]
kind = "mock"
script = "agent_script.json"

[embedding]
kind = "synthetic"
world = "world.json"

[refinement]
{extra_refinement}
[trace]
path = "out/{out_dir}/trace.jsonl"
metrics_path = "out/{out_dir}/metrics.json"
{extra_eval}"#
    )
}

/// Write every fixture file into `dir`.
pub fn write_fixtures(dir: impl AsRef<Path>) -> std::io::Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("world.json"),
        serde_json::to_string_pretty(&world()).expect("serializes") + "\n",
    )?;
    fs::write(dir.join("guidelines.json"), guidelines_json())?;
    fs::write(dir.join("manifest_multilabel.csv"), manifest_multilabel_csv())?;
    fs::write(dir.join("manifest_singlelabel.csv"), manifest_singlelabel_csv())?;
    fs::write(dir.join("agent_script.json"), agent_script_json())?;
    fs::write(dir.join("graph.txt"), graph_text())?;
    fs::write(
        dir.join("config_multilabel.toml"),
        config_toml("manifest_multilabel.csv", "multilabel", "", "", ""),
    )?;
    fs::write(
        dir.join("config_singlelabel.toml"),
        config_toml(
            "manifest_singlelabel.csv",
            "singlelabel",
            "task_mode = \"single_label\"\nscoring = \"positive_only\"\n",
            "",
            "\n[eval]\ntail_labels = [\"Pneumonia\", \"Pneumothorax\", \"No Finding\"]\n",
        ),
    )?;
    // Ablation axis variants for the comparison harness.
    fs::write(
        dir.join("config_ablate_naive.toml"),
        config_toml(
            "manifest_multilabel.csv",
            "ablate_naive",
            "negation_mode = \"naive\"\n",
            "",
            "",
        ),
    )?;
    fs::write(
        dir.join("config_ablate_nocot.toml"),
        config_toml(
            "manifest_multilabel.csv",
            "ablate_nocot",
            "",
            "use_cot = false\n",
            "",
        ),
    )?;
    fs::write(
        dir.join("config_ablate_dg.toml"),
        config_toml(
            "manifest_multilabel.csv",
            "ablate_dg",
            "",
            "include_disease_graph = true\ngraph_text_path = \"graph.txt\"\n",
            "",
        ),
    )?;
    fs::write(
        dir.join("config_ablate_nocot_dg.toml"),
        config_toml(
            "manifest_multilabel.csv",
            "ablate_nocot_dg",
            "",
            "use_cot = false\ninclude_disease_graph = true\ngraph_text_path = \"graph.txt\"\n",
            "",
        ),
    )?;
    Ok(())
}
