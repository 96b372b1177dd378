//! Shared fixtures for the benchmark targets.

use parathink_core::engine::{SessionConfig, Transcript};
use parathink_core::fixtures::{demo_inputs, seeded_session};
use parathink_core::{ModelConfig, Precision, ToyDecoder};

/// Model plus inputs sized for steady-state benchmarking.
pub struct BenchSetup {
    pub model: ToyDecoder,
    pub config: SessionConfig,
    pub prompt: Vec<parathink_core::TokenId>,
    pub path_prompts: Vec<Vec<parathink_core::TokenId>>,
}

pub fn bench_setup(n_paths: usize) -> BenchSetup {
    let spec = seeded_session(7, n_paths, Precision::Fp64);
    let model = ToyDecoder::init(&ModelConfig {
        seed: 7,
        ..ModelConfig::desk_default()
    })
    .expect("desk config is valid");
    let (prompt, path_prompts) = demo_inputs(n_paths);
    BenchSetup {
        model,
        config: spec.session,
        prompt,
        path_prompts,
    }
}

pub fn run_session(setup: &BenchSetup) -> Transcript {
    parathink_core::engine::run(
        &setup.model,
        setup.config.clone(),
        setup.prompt.clone(),
        setup.path_prompts.clone(),
    )
    .expect("bench session runs")
}
