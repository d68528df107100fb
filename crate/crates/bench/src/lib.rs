//! Shared fixtures for the benchmarks.

use groundlift_core::pipeline::{prepare, Prepared, RunConfig};

/// Default config and its seed-1 scene.
pub fn fixture() -> (RunConfig, Prepared) {
    let cfg = RunConfig::default();
    let prep = prepare(cfg.seed, &cfg.scene).expect("default scene prepares");
    (cfg, prep)
}
