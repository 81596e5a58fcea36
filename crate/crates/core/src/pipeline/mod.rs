//! Stage-oriented driver: run configuration, model artifacts, the on-disk
//! stages and an in-memory end-to-end experiment on synthetic data.

pub mod artifacts;
pub mod config;
pub mod experiment;
pub mod stages;
pub mod system;

pub use artifacts::Artifact;
pub use config::{FeatureSettings, FeatureType, IvectorSettings, NnetSettings, PosteriorKind, RunConfig, SynthSettings, Vtln};
pub use experiment::{extend_pipeline, run_pipeline, ExtendedRun, PipelineRun, PreparedCorpus};
pub use stages::{run_all, run_stage, sha256_file, Layout, Stage, StageStatus};
pub use system::{PosteriorModel, TrialKey, UttFeatures};
