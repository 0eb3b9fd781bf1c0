//! Pipeline around the `asymrd` library: long-form confusion ingestion,
//! per-block analysis, grid simulation, reporting and run manifests.

pub mod analyze;
pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;
pub mod manifest;
pub mod report;
pub mod simulate;
pub mod table;

pub use config::Config;
pub use error::CliError;
pub use manifest::RunManifest;
