//! Experiment harness for the `tll-lab` command-line tool.
//!
//! A run reads one TOML config ([`config::parse_config`]), executes its
//! scenario inside a worker pool ([`scenario::run_scenario`]) and writes CSV,
//! JSON and SVG files together with a checksummed `manifest.json`.

pub mod config;
pub mod output;
pub mod scenario;
pub mod svg;

pub use config::{parse_config, parse_config_str, ConfigErrors, ExperimentConfig, Scenario};
pub use output::{ResultManifest, CSV_SCHEMAS};
pub use scenario::run_scenario;

/// Exit status of a completed run.
pub fn exit_code(manifest: &ResultManifest) -> i32 {
    if manifest.warnings.is_empty() {
        0
    } else {
        2
    }
}

/// Exit status for a failed run: solver non-convergence counts as a physics
/// warning, anything else as an error.
pub fn error_exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<tll_core::Error>() {
        Some(tll_core::Error::NotConverged { .. }) => 2,
        _ => 1,
    }
}

/// Run `cfg` on a dedicated pool of `cfg.workers` threads (0 = all cores).
pub fn run_with_pool(cfg: &ExperimentConfig) -> anyhow::Result<ResultManifest> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()?;
    pool.install(|| run_scenario(cfg))
}
