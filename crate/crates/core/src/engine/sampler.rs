//! Token selection over a legality-filtered logit vector.
//!
//! Decoding constrains the candidate set so layouts stay well-formed: inside
//! a path only ordinary tokens and that path's close tag are legal, inside
//! the summary only ordinary tokens and the summary close tag. The verifier
//! applies the same rule to oracle logits.

use crate::layout::TokenId;
use crate::rng::SplitMix64;

use super::Sampling;

/// Pick the next token. Greedy takes the argmax with ties broken by the
/// lowest token id; top-k keeps the k best legal tokens (score descending,
/// id ascending), applies the temperature and draws from the renormalized
/// distribution using the per-path stream.
pub fn sample_token(
    logits: &[f64],
    legal: &dyn Fn(TokenId) -> bool,
    sampling: &Sampling,
    rng: &mut SplitMix64,
) -> TokenId {
    match *sampling {
        Sampling::Greedy => {
            let mut best: Option<(TokenId, f64)> = None;
            for (id, &score) in logits.iter().enumerate() {
                let id = id as TokenId;
                if !legal(id) {
                    continue;
                }
                match best {
                    Some((_, s)) if score <= s => {}
                    _ => best = Some((id, score)),
                }
            }
            best.expect("at least one legal token").0
        }
        Sampling::TopK { k, temperature, .. } => {
            let mut candidates: Vec<(TokenId, f64)> = logits
                .iter()
                .enumerate()
                .filter(|(id, _)| legal(*id as TokenId))
                .map(|(id, &s)| (id as TokenId, s))
                .collect();
            candidates.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.0.cmp(&b.0))
            });
            candidates.truncate(k.max(1));
            let max = candidates[0].1;
            let weights: Vec<f64> = candidates
                .iter()
                .map(|(_, s)| ((s - max) / temperature).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let draw = rng.next_f64() * total;
            let mut acc = 0.0;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if draw < acc {
                    return candidates[i].0;
                }
            }
            candidates.last().expect("non-empty candidates").0
        }
    }
}
