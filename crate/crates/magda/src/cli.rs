//! Command-line entry points: run, eval, inspect, ablate, validate.
//!
//! Exit codes: 0 success, 1 operational failure (backend, pipeline, or
//! evaluation error), 2 usage or configuration error.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::config::{Config, EmbeddingKind, LlmKind};
use crate::embedding::{
    CachedBackend, EmbeddingBackend, HttpEmbeddingBackend, SyntheticWorld, VlmConfig,
};
use crate::evaluation::{build_report, emit_report, ReportFormat};
use crate::guidelines::load_guidelines;
use crate::llm::{HttpLlmBackend, LlmBackend, MockBackend};
use crate::pipeline::{Engine, EngineOptions, PatientResult};
use crate::refinement::RefinementConfig;
use crate::trace::TraceFile;

#[derive(Debug)]
enum CliError {
    /// Bad usage or configuration: exit code 2.
    Config(String),
    /// Operational failure: exit code 1.
    Run(String),
}

impl CliError {
    fn code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            CliError::Run(_) => ExitCode::from(1),
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Run(m) => m,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn run_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

#[derive(Parser)]
#[command(name = "magda", about = "Multi-agent zero-shot diagnosis pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to the run configuration TOML.
    #[arg(long)]
    config: PathBuf,
    /// Dotted-key overrides, e.g. --set run.psi=0.5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline over the configured dataset manifest.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue a previous run from its trace file.
        #[arg(long)]
        resume: bool,
    },
    /// Recompute metrics from a trace file.
    Eval {
        /// Trace file produced by `run`.
        #[arg(long)]
        traces: PathBuf,
        /// Labels counted for tail-class accuracy (single-label traces only).
        #[arg(long, value_delimiter = ',')]
        tail_labels: Vec<String>,
    },
    /// Print the recorded agent activity for one patient.
    Inspect {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        patient: String,
    },
    /// Run several configs differing only in ablation axes and tabulate them.
    Ablate {
        /// Configuration files, one per arm.
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
    },
    /// Check a configuration and its referenced files without running.
    Validate {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, resume } => cmd_run(&config, resume),
        Command::Eval {
            traces,
            tail_labels,
        } => cmd_eval(&traces, &tail_labels),
        Command::Inspect { traces, patient } => cmd_inspect(&traces, &patient),
        Command::Ablate { configs } => cmd_ablate(&configs),
        Command::Validate { config } => cmd_validate(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<Config, CliError> {
    let config = Config::load_with_overrides(&args.config, &args.overrides).map_err(config_err)?;
    config.validate().map_err(config_err)?;
    Ok(config)
}

fn build_engine(config: &Config) -> Result<Engine, CliError> {
    let guidelines =
        load_guidelines(config.resolve(&config.guidelines.path)).map_err(config_err)?;

    let llm: Arc<dyn LlmBackend> = match config.llm.kind {
        LlmKind::Mock => Arc::new(
            MockBackend::from_script_file(config.resolve(&config.llm.script))
                .map_err(config_err)?,
        ),
        LlmKind::Http => Arc::new(HttpLlmBackend::new(
            config.llm.base_url.clone(),
            config.llm.model.clone(),
        )),
    };
    let embedder: Arc<dyn EmbeddingBackend> = match config.embedding.kind {
        EmbeddingKind::Synthetic => Arc::new(
            SyntheticWorld::from_file(config.resolve(&config.embedding.world))
                .map_err(config_err)?,
        ),
        EmbeddingKind::Http => Arc::new(CachedBackend::new(HttpEmbeddingBackend::new(
            config.embedding.base_url.clone(),
            config.embedding.dim,
        ))),
    };

    let options = EngineOptions {
        vlm: VlmConfig::new(config.run.psi, config.run.scoring).map_err(config_err)?,
        negation_mode: config.run.negation_mode,
        temperature: config.run.temperature,
        max_tokens: config.run.max_tokens,
        max_retries: config.run.max_retries,
        refinement: RefinementConfig {
            use_cot: config.refinement.use_cot,
            include_disease_graph: config.refinement.include_disease_graph,
            graph_text: config.graph_text().map_err(config_err)?,
            task_mode: config.run.task_mode,
        },
        screening_template: config.screening_template().map_err(config_err)?,
        diagnosis_template: config.diagnosis_template().map_err(config_err)?,
        refinement_template: config.refinement_template().map_err(config_err)?,
        parallelism: config.run.parallelism,
    };
    Ok(Engine {
        llm,
        embedder,
        guidelines,
        options,
    })
}

fn write_metrics(
    config: &Config,
    results: &[PatientResult],
    labels: &[String],
    fingerprint: &str,
) -> Result<(), CliError> {
    let has_truth = !results.is_empty()
        && results
            .iter()
            .all(|r| r.true_labels.values().any(Option::is_some));
    if !has_truth {
        println!("no ground truth in manifest; skipping metrics");
        return Ok(());
    }
    let report =
        build_report(results, labels, &config.eval.tail_labels, fingerprint).map_err(run_err)?;
    print!("{}", emit_report(&report, ReportFormat::TextTable));
    if !config.trace.metrics_path.is_empty() {
        let path = config.resolve(&config.trace.metrics_path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(run_err)?;
        }
        std::fs::write(&path, emit_report(&report, ReportFormat::Json)).map_err(run_err)?;
        println!("metrics written to {}", path.display());
    }
    Ok(())
}

fn cmd_run(args: &ConfigArgs, resume: bool) -> Result<(), CliError> {
    let config = load_config(args)?;
    let engine = build_engine(&config)?;

    // Fail fast before touching any patient.
    engine.llm.preflight().map_err(run_err)?;
    engine.embedder.preflight().map_err(run_err)?;

    let fingerprint = config.fingerprint().map_err(config_err)?;
    let outcome = engine
        .run_dataset(
            config.resolve(&config.dataset.manifest),
            config.resolve(&config.trace.path),
            &fingerprint,
            resume,
        )
        .map_err(run_err)?;

    if outcome.resumed > 0 {
        println!("resumed {} completed patients from trace", outcome.resumed);
    }
    println!(
        "processed {} patients ({} failed)",
        outcome.results.len() + outcome.failures.len(),
        outcome.failures.len()
    );
    for (patient, reason) in &outcome.failures {
        eprintln!("patient {patient} failed: {reason}");
    }
    write_metrics(&config, &outcome.results, &outcome.labels, &fingerprint)?;
    if outcome.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Run(format!(
            "{} patients failed",
            outcome.failures.len()
        )))
    }
}

fn cmd_eval(traces: &PathBuf, tail_labels: &[String]) -> Result<(), CliError> {
    let trace = TraceFile::read(traces).map_err(run_err)?;
    let fingerprint = trace.header_fingerprint().map_err(run_err)?;
    let completed: Vec<PatientResult> = trace.completed_patients().into_values().collect();
    if completed.is_empty() {
        return Err(CliError::Run("trace contains no completed patients".into()));
    }
    let labels: Vec<String> = completed
        .iter()
        .flat_map(|r| r.true_labels.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let report =
        build_report(&completed, &labels, tail_labels, &fingerprint).map_err(run_err)?;
    print!("{}", emit_report(&report, ReportFormat::TextTable));
    Ok(())
}

fn cmd_inspect(traces: &PathBuf, patient: &str) -> Result<(), CliError> {
    let trace = TraceFile::read(traces).map_err(run_err)?;
    let records: Vec<_> = trace
        .records
        .iter()
        .filter(|r| r.patient_id.as_deref() == Some(patient))
        .collect();
    if records.is_empty() {
        return Err(CliError::Run(format!(
            "no records for patient {patient:?} in {}",
            traces.display()
        )));
    }
    for record in records {
        let kind = serde_json::to_string(&record.kind).expect("kind serializes");
        let disease = record.disease.as_deref().unwrap_or("-");
        println!(
            "#{:<6} {:<16} {:<24} {}",
            record.seq,
            kind.trim_matches('"'),
            disease,
            serde_json::to_string(&record.payload).expect("payload serializes")
        );
    }
    if trace.truncated {
        eprintln!("note: trace ends in a truncated record");
    }
    Ok(())
}

fn cmd_ablate(configs: &[PathBuf]) -> Result<(), CliError> {
    if configs.len() < 2 {
        return Err(CliError::Config(
            "ablate needs at least two --config files".into(),
        ));
    }
    let mut loaded = Vec::new();
    for path in configs {
        let config = Config::load(path).map_err(config_err)?;
        config.validate().map_err(config_err)?;
        loaded.push((path, config));
    }

    // All arms must agree on everything except the ablation axes.
    let base = loaded[0]
        .1
        .fingerprint_excluding_ablation_axes()
        .map_err(config_err)?;
    for (path, config) in &loaded[1..] {
        let fp = config
            .fingerprint_excluding_ablation_axes()
            .map_err(config_err)?;
        if fp != base {
            return Err(CliError::Config(format!(
                "config {} differs from {} beyond the ablation axes \
                 (negation mode, chain-of-thought, disease graph)",
                path.display(),
                loaded[0].0.display()
            )));
        }
    }

    let mut rows: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for (path, config) in &loaded {
        let engine = build_engine(config)?;
        engine.llm.preflight().map_err(run_err)?;
        engine.embedder.preflight().map_err(run_err)?;
        let fingerprint = config.fingerprint().map_err(config_err)?;
        let outcome = engine
            .run_dataset(
                config.resolve(&config.dataset.manifest),
                config.resolve(&config.trace.path),
                &fingerprint,
                false,
            )
            .map_err(run_err)?;
        if !outcome.failures.is_empty() {
            return Err(CliError::Run(format!(
                "arm {} had {} failed patients",
                path.display(),
                outcome.failures.len()
            )));
        }
        let report = build_report(
            &outcome.results,
            &outcome.labels,
            &config.eval.tail_labels,
            &fingerprint,
        )
        .map_err(run_err)?;
        let (negation, cot, graph) = config.ablation_key();
        let key = format!(
            "negation={} cot={} graph={}",
            match negation {
                crate::screening::NegationMode::Llm => "llm",
                crate::screening::NegationMode::Naive => "naive",
            },
            if cot { "on" } else { "off" },
            if graph { "on" } else { "off" }
        );
        rows.insert(key, (report.micro.f1, report.macro_.f1));
    }

    println!("{:<40} {:>10} {:>10}", "arm", "micro-F1", "macro-F1");
    for (key, (micro, macro_)) in &rows {
        println!("{key:<40} {micro:>10.4} {macro_:>10.4}");
    }
    Ok(())
}

fn cmd_validate(args: &ConfigArgs) -> Result<(), CliError> {
    let config = load_config(args)?;
    load_guidelines(config.resolve(&config.guidelines.path)).map_err(config_err)?;
    crate::pipeline::load_manifest(config.resolve(&config.dataset.manifest))
        .map_err(config_err)?;
    match config.llm.kind {
        LlmKind::Mock => {
            MockBackend::from_script_file(config.resolve(&config.llm.script))
                .map_err(config_err)?;
        }
        LlmKind::Http => {}
    }
    if config.embedding.kind == EmbeddingKind::Synthetic {
        SyntheticWorld::from_file(config.resolve(&config.embedding.world)).map_err(config_err)?;
    }
    config.screening_template().map_err(config_err)?;
    config.diagnosis_template().map_err(config_err)?;
    config.refinement_template().map_err(config_err)?;
    config.graph_text().map_err(config_err)?;
    println!("config ok");
    println!("fingerprint: {}", config.fingerprint().map_err(config_err)?);
    Ok(())
}
