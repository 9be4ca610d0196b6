//! Multi-agent zero-shot diagnosis pipeline: a screening agent probes an
//! image through contrastive text prompts, a diagnosis agent reasons over the
//! verdicts, and a refinement agent cross-checks the results into final
//! per-patient labels.

pub mod cli;
pub mod config;
pub mod diagnosis;
pub mod embedding;
pub mod evaluation;
pub mod fixture;
pub mod guidelines;
pub mod llm;
pub mod pipeline;
pub mod refinement;
pub mod screening;
pub mod trace;
