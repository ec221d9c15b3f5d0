//! Pipeline orchestration: configuration, run manifests and the stage
//! implementations behind the `canopy-ledger` subcommands.

pub mod config;
pub mod manifest;
pub mod report;
pub mod stages;

pub use config::Config;
pub use manifest::RunManifest;
