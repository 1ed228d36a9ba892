//! Synthetic corpus with an exact alignment oracle, end-to-end training
//! orchestration, metrics, and manifest plumbing.

pub mod config;
pub mod eval;
pub mod pipeline;
pub mod synth;

pub use config::PipelineConfig;
pub use eval::{eval_suite, EvalOptions, EvalReport};
pub use pipeline::{
    load_artifacts, pipeline_train, read_manifest, write_manifest, PipelineArtifacts, RunManifest,
};
pub use synth::{oracle_check, synth_generate, OracleReport, Sample, SynthSpec};
