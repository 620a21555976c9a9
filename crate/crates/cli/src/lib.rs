//! Pipeline stages behind the `analogykb` binary.

pub mod config;
pub mod stages;

pub use config::PipelineConfig;
pub use stages::{Ctx, MissingArtifact};
