//! Config-driven pipeline: pattern, simulate, label, patches, train,
//! predict, detect and eval stages over one run directory.

pub mod config;
pub mod error;
pub mod pipeline;

pub use config::{Overrides, PipelineConfig};
pub use error::{CliError, Result};
pub use pipeline::{run, RunManifest, Stage};
