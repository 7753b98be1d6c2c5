//! Experiment orchestration: plans and presets, stage execution with
//! resumption, and the artifact manifest.

pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod plan;

pub use error::{PipelineError, Result};
pub use manifest::{Manifest, ManifestEntry, MANIFEST_FILE};
pub use pipeline::{Pipeline, RunSummary};
pub use plan::{ExperimentPlan, Scale, Stage, Suite, PRESETS};
