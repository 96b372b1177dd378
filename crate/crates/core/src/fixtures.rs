//! Deterministic session inputs shared by the CLI, the benchmarks and the
//! acceptance suite.

use crate::datakit::{encode_bytes, ScanOrder};
use crate::engine::SessionConfig;
use crate::layout::TokenId;
use crate::model::ModelConfig;
use crate::precision::Precision;
use crate::rng::SplitMix64;

/// Everything needed to run one seeded session.
#[derive(Debug, Clone)]
pub struct SessionSpec {
    pub model: ModelConfig,
    pub session: SessionConfig,
    pub prompt: Vec<TokenId>,
    pub path_prompts: Vec<Vec<TokenId>>,
}

/// Derive a session from a seed: prompt of 1..=32 byte tokens, per-path
/// budget 2..=32, summary budget 2..=16, path prompts of up to 4 tokens.
pub fn seeded_session(seed: u64, n_paths: usize, precision: Precision) -> SessionSpec {
    let mut rng = SplitMix64::new(seed);
    let shared_len = 1 + rng.next_below(32);
    let prompt: Vec<TokenId> = (0..shared_len)
        .map(|_| rng.next_below(256) as TokenId)
        .collect();
    let path_prompts: Vec<Vec<TokenId>> = (0..n_paths)
        .map(|_| {
            let len = rng.next_below(5);
            (0..len).map(|_| rng.next_below(256) as TokenId).collect()
        })
        .collect();
    let session = SessionConfig {
        n_paths,
        max_path_tokens: 2 + rng.next_below(31),
        max_summary_tokens: 2 + rng.next_below(15),
        ..SessionConfig::default()
    };
    let model = ModelConfig {
        seed,
        precision,
        ..ModelConfig::desk_default()
    };
    SessionSpec {
        model,
        session,
        prompt,
        path_prompts,
    }
}

/// Fixed demo inputs: a counting question with one scan instruction per
/// path.
pub fn demo_inputs(n_paths: usize) -> (Vec<TokenId>, Vec<Vec<TokenId>>) {
    let prompt = encode_bytes(b"How many markers are in the image?");
    let path_prompts = ScanOrder::ALL[..n_paths.min(4)]
        .iter()
        .map(|o| encode_bytes(format!("{}: ", o.instruction()).as_bytes()))
        .chain(std::iter::repeat_with(Vec::new))
        .take(n_paths)
        .collect();
    (prompt, path_prompts)
}
