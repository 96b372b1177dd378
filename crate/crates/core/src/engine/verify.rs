//! Transcript replay against the monolithic forward pass.

use std::collections::HashMap;

use crate::layout::{SpecialVocab, TokenId, TokenRole};
use crate::mask::build_path_mask;
use crate::model::{forward_full, ToyDecoder};
use crate::rng::{derive_stream, SplitMix64};
use crate::rope::assign_positions;
use crate::{Error, Result};

use super::{sample_token, Transcript};

/// Replay verdict.
#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    pub ok: bool,
    /// Largest absolute difference between the engine's recorded logits and
    /// the oracle rows they were sampled from.
    pub max_abs_logit_diff: f64,
    /// First failure site, when `ok` is false.
    pub failure: Option<String>,
}

impl VerifyOutcome {
    fn fail(&mut self, msg: String) {
        if self.ok {
            self.ok = false;
            self.failure = Some(msg);
        }
    }
}

/// Rebuild the layout, mask and position plan from a transcript, run the
/// monolithic forward pass, and check that every non-forced token equals
/// the sampler's choice from the oracle logits. Forced tokens are checked
/// structurally (tags in the right places) and excluded from sampler
/// agreement.
pub fn verify_transcript(model: &ToyDecoder, transcript: &Transcript) -> Result<VerifyOutcome> {
    let vocab = SpecialVocab::desk_default();
    let layout = transcript.layout()?;
    let tokens = transcript.flattened_tokens();
    let mask = build_path_mask(&layout);
    let plan = assign_positions(&layout);
    let oracle = forward_full(model, &tokens, &mask, &plan)?;

    let mut outcome = VerifyOutcome {
        ok: true,
        max_abs_logit_diff: 0.0,
        failure: None,
    };

    let mut engine_logits: HashMap<(TokenRole, usize), &[f64]> = HashMap::new();
    for rec in &transcript.sampled_logits {
        engine_logits.insert((rec.role, rec.offset), &rec.logits);
    }

    // (role, tokens, open tag, close tag, sampling stream index)
    let mut segments: Vec<(TokenRole, &[super::Emitted], TokenId, TokenId, u64)> = Vec::new();
    for (i, path) in transcript.paths.iter().enumerate() {
        let k = i + 1;
        segments.push((
            TokenRole::Path(k),
            path,
            vocab.think_open(k)?,
            vocab.think_close(k)?,
            k as u64,
        ));
    }
    segments.push((
        TokenRole::Summary,
        &transcript.summary,
        vocab.summary_open(),
        vocab.summary_close(),
        0,
    ));

    let seed = transcript.config.sampling.stream_seed();
    for (role, emitted, open, close, stream) in segments {
        if emitted.first().map(|e| (e.token, e.forced)) != Some((open, true)) {
            outcome.fail(format!("{role}: missing forced open tag"));
        }
        if emitted.last().map(|e| e.token) != Some(close) {
            outcome.fail(format!("{role}: missing close tag"));
        }
        let mut rng = SplitMix64::new(derive_stream(seed, stream));
        for (offset, e) in emitted.iter().enumerate() {
            if e.forced {
                continue;
            }
            if offset == 0 {
                outcome.fail(format!("{role}: first token was not forced"));
                continue;
            }
            let row = layout.flat_index(role, offset - 1)?;
            let oracle_row = oracle.row(row);
            if let Some(engine_row) = engine_logits.get(&(role, offset)) {
                let diff = engine_row
                    .iter()
                    .zip(oracle_row)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                outcome.max_abs_logit_diff = outcome.max_abs_logit_diff.max(diff);
            }
            let expected = sample_token(
                oracle_row,
                &|t| !vocab.is_special(t) || t == close,
                &transcript.config.sampling,
                &mut rng,
            );
            if expected != e.token {
                outcome.fail(format!(
                    "{role} offset {offset}: engine emitted {} but the oracle sampler picks {expected}",
                    e.token
                ));
            }
        }
    }
    Ok(outcome)
}

/// Wrapper that turns a failed verification into an error.
pub fn expect_verified(model: &ToyDecoder, transcript: &Transcript) -> Result<VerifyOutcome> {
    let outcome = verify_transcript(model, transcript)?;
    if !outcome.ok {
        return Err(Error::InvalidConfig(format!(
            "transcript verification failed: {}",
            outcome.failure.as_deref().unwrap_or("unknown")
        )));
    }
    Ok(outcome)
}
