//! Two-stage decoding engine: shared prefill, lockstep parallel path
//! decoding triggered by forced think-open tokens, then summary decoding
//! over the merged cache.
//!
//! Stages move strictly forward (Prefill, ParallelReasoning, Summary, Done);
//! the summary starts only once every path has closed or exhausted its
//! budget. Paths advance in lockstep rounds, one token per unfinished path
//! per round; within a round the update order is irrelevant because each
//! path owns its cache and the model is read-only.

mod sampler;
mod verify;

pub use sampler::sample_token;
pub use verify::{expect_verified, verify_transcript, VerifyOutcome};

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::kvcache::{
    prefill_shared, BlockStore, CacheStats, KvConfig, SequenceCache, SequenceHandle,
};
use crate::layout::{SegmentLayout, SpecialVocab, TokenId, TokenRole, MAX_PATHS};
use crate::model::{forward_step, ToyDecoder};
use crate::rng::{derive_stream, SplitMix64};
use crate::rope::PositionPlan;
use crate::{Error, Result};

/// Decoding regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Shared prefill, forked paths, merged summary.
    Parallel,
    /// One chain: a single think block then the summary.
    Sequential,
    /// `n_paths` independent full decodes with a majority vote.
    Replicated,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Parallel => write!(f, "parallel"),
            Mode::Sequential => write!(f, "sequential"),
            Mode::Replicated => write!(f, "replicated"),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Mode::Parallel),
            "sequential" => Ok(Mode::Sequential),
            "replicated" => Ok(Mode::Replicated),
            other => Err(Error::InvalidConfig(format!("unknown mode '{other}'"))),
        }
    }
}

/// Token selection rule. Top-k streams are seeded per path as
/// `derive_stream(seed, path_index)`, with stream 0 reserved for the
/// summary, so transcripts replay exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    /// Argmax with ties broken by the lowest token id.
    Greedy,
    TopK { k: usize, temperature: f64, seed: u64 },
}

impl Sampling {
    pub(crate) fn stream_seed(&self) -> u64 {
        match self {
            Sampling::Greedy => 0,
            Sampling::TopK { seed, .. } => *seed,
        }
    }
}

/// Session limits and switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub mode: Mode,
    pub n_paths: usize,
    /// Sampled tokens allowed per path, excluding the forced open tag and
    /// path prompt. At exhaustion the close tag is forced so layouts stay
    /// well-formed.
    pub max_path_tokens: usize,
    /// Sampled tokens allowed in the summary.
    pub max_summary_tokens: usize,
    pub sampling: Sampling,
    /// Reuse path caches for the summary via merge; when false the summary
    /// context is re-prefilled from raw tokens (counted separately).
    pub reuse_kv: bool,
    pub block_size: usize,
    pub max_blocks: usize,
    pub log_access: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Parallel,
            n_paths: 4,
            max_path_tokens: 32,
            max_summary_tokens: 16,
            sampling: Sampling::Greedy,
            reuse_kv: true,
            block_size: 16,
            max_blocks: 4096,
            log_access: false,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_path_tokens == 0 || self.max_summary_tokens == 0 {
            return Err(Error::ZeroBudget);
        }
        if self.n_paths == 0 || self.n_paths > MAX_PATHS {
            return Err(Error::TooManyPaths {
                requested: self.n_paths,
                max: MAX_PATHS,
            });
        }
        if self.block_size == 0 {
            return Err(Error::InvalidConfig("block_size must be positive".into()));
        }
        if let Sampling::TopK { k, temperature, .. } = self.sampling {
            if k == 0 {
                return Err(Error::InvalidConfig("top-k needs k >= 1".into()));
            }
            if !(temperature > 0.0) {
                return Err(Error::InvalidConfig(
                    "top-k temperature must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    /// Paths actually decoded: sequential and replicated runs use one chain.
    pub fn effective_paths(&self) -> usize {
        match self.mode {
            Mode::Parallel => self.n_paths,
            Mode::Sequential | Mode::Replicated => 1,
        }
    }
}

/// Session stage, monotone in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Prefill,
    ParallelReasoning,
    Summary,
    Done,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Prefill => "prefill",
            Stage::ParallelReasoning => "parallel-reasoning",
            Stage::Summary => "summary",
            Stage::Done => "done",
        }
    }
}

/// One emitted token; forced tokens (tags, path prompts) are excluded from
/// sampler-agreement checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Emitted {
    pub token: TokenId,
    pub forced: bool,
}

/// Logits a non-forced token was sampled from, kept for oracle comparison.
#[derive(Debug, Clone)]
pub struct SampledLogits {
    pub role: TokenRole,
    pub offset: usize,
    pub logits: Vec<f64>,
}

/// Full record of one session; token lists alone determine the layout, so
/// transcripts replay through the monolithic forward pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transcript {
    pub prompt: Vec<TokenId>,
    pub paths: Vec<Vec<Emitted>>,
    pub summary: Vec<Emitted>,
    pub config: SessionConfig,
    pub stats: CacheStats,
    pub decode_steps: u64,
    /// Engine logits per sampled token; dropped by text serialization.
    #[serde(skip)]
    pub sampled_logits: Vec<SampledLogits>,
}

impl Transcript {
    pub fn layout(&self) -> Result<SegmentLayout> {
        SegmentLayout::new(
            self.prompt.len(),
            self.paths.iter().map(Vec::len).collect(),
            self.summary.len(),
        )
    }

    pub fn flattened_tokens(&self) -> Vec<TokenId> {
        let mut out = self.prompt.clone();
        for path in &self.paths {
            out.extend(path.iter().map(|e| e.token));
        }
        out.extend(self.summary.iter().map(|e| e.token));
        out
    }

    /// Bytes between the boxed-answer delimiters in the summary, if any.
    pub fn boxed_answer(&self, vocab: &SpecialVocab) -> Option<Vec<u8>> {
        let bytes: Vec<u8> = self
            .summary
            .iter()
            .filter(|e| e.token < 256)
            .map(|e| e.token as u8)
            .collect();
        let open = vocab.boxed_open();
        let start = bytes
            .windows(open.len().max(1))
            .position(|w| w == open)?
            + open.len();
        let close = vocab.boxed_close();
        let rel_end = bytes[start..]
            .windows(close.len().max(1))
            .position(|w| w == close)?;
        Some(bytes[start..start + rel_end].to_vec())
    }
}

struct PathState {
    handle: SequenceHandle,
    emitted: Vec<Emitted>,
    pending: VecDeque<TokenId>,
    finished: bool,
    sampled: usize,
    rng: SplitMix64,
    last_logits: Vec<f64>,
}

/// Stage machine for one decode.
pub struct DecodeSession<'m> {
    model: &'m ToyDecoder,
    config: SessionConfig,
    vocab: SpecialVocab,
    store: BlockStore,
    stage: Stage,
    prompt: Vec<TokenId>,
    path_prompts: Vec<Vec<TokenId>>,
    shared: Option<SequenceCache>,
    paths: Vec<PathState>,
    rebuilt: Vec<SequenceCache>,
    summary_handle: Option<SequenceHandle>,
    summary_emitted: Vec<Emitted>,
    summary_pending: VecDeque<TokenId>,
    summary_sampled: usize,
    summary_rng: SplitMix64,
    summary_last_logits: Vec<f64>,
    summary_start: usize,
    decode_steps: u64,
    sampled_logits: Vec<SampledLogits>,
}

fn reject_tag_tokens(vocab: &SpecialVocab, tokens: &[TokenId], what: &str) -> Result<()> {
    for &t in tokens {
        if vocab.classify(t).is_some_and(|s| s != crate::layout::SpecialToken::Pad) {
            return Err(Error::InvalidConfig(format!(
                "{what} contains reserved tag token {t}"
            )));
        }
    }
    Ok(())
}

impl<'m> DecodeSession<'m> {
    pub fn new(
        model: &'m ToyDecoder,
        config: SessionConfig,
        prompt: Vec<TokenId>,
        path_prompts: Vec<Vec<TokenId>>,
    ) -> Result<Self> {
        config.validate()?;
        let vocab = SpecialVocab::desk_default();
        vocab.validate_vocab(model.config().vocab_size)?;
        let n = config.effective_paths();
        if n > model.path_embeddings().n_paths() {
            return Err(Error::UnknownPath {
                path: n,
                n_paths: model.path_embeddings().n_paths(),
            });
        }
        if config.mode == Mode::Parallel && prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        if path_prompts.len() != n {
            return Err(Error::InvalidConfig(format!(
                "expected {n} path prompts, got {}",
                path_prompts.len()
            )));
        }
        reject_tag_tokens(&vocab, &prompt, "prompt")?;
        for pp in &path_prompts {
            reject_tag_tokens(&vocab, pp, "path prompt")?;
        }
        let store = BlockStore::new(
            KvConfig {
                block_size: config.block_size,
                max_blocks: config.max_blocks,
                log_access: config.log_access,
            },
            model.config().n_layers,
            model.config().model_dim(),
        );
        let seed = config.sampling.stream_seed();
        Ok(Self {
            model,
            vocab,
            store,
            stage: Stage::Prefill,
            prompt,
            path_prompts,
            shared: None,
            paths: Vec::new(),
            rebuilt: Vec::new(),
            summary_handle: None,
            summary_emitted: Vec::new(),
            summary_pending: VecDeque::new(),
            summary_sampled: 0,
            summary_rng: SplitMix64::new(derive_stream(seed, 0)),
            summary_last_logits: Vec::new(),
            summary_start: 0,
            decode_steps: 0,
            sampled_logits: Vec::new(),
            config,
        })
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn store(&self) -> &BlockStore {
        &self.store
    }

    pub fn path_emitted(&self, k: usize) -> &[Emitted] {
        &self.paths[k - 1].emitted
    }

    fn expect_stage(&self, expected: Stage) -> Result<()> {
        if self.stage != expected {
            return Err(Error::WrongStage {
                expected: expected.name(),
                actual: self.stage.name(),
            });
        }
        Ok(())
    }

    /// Prefill the shared context once, fork one sequence per path, and
    /// force each path's think-open trigger.
    pub fn prefill(&mut self) -> Result<()> {
        self.expect_stage(Stage::Prefill)?;
        let plan = PositionPlan::consecutive(self.prompt.len());
        let shared = prefill_shared(&mut self.store, self.model, &self.prompt, &plan)?;
        let n = self.config.effective_paths();
        let children = self.store.fork(&shared, n)?;
        let seed = self.config.sampling.stream_seed();
        let shared_len = self.prompt.len();
        for (i, child) in children.into_iter().enumerate() {
            let k = i + 1;
            let mut state = PathState {
                handle: SequenceHandle::new(child),
                emitted: Vec::new(),
                pending: self.path_prompts[i].iter().copied().collect(),
                finished: false,
                sampled: 0,
                rng: SplitMix64::new(derive_stream(seed, k as u64)),
                last_logits: Vec::new(),
            };
            let open = self.vocab.think_open(k)?;
            let logits = forward_step(
                self.model,
                &mut self.store,
                &mut state.handle,
                open,
                shared_len,
                Some(k),
            )?;
            self.decode_steps += 1;
            state.emitted.push(Emitted {
                token: open,
                forced: true,
            });
            state.last_logits = logits;
            self.paths.push(state);
        }
        self.shared = Some(shared);
        self.stage = Stage::ParallelReasoning;
        Ok(())
    }

    /// One lockstep round in natural path order; transitions to the summary
    /// stage once every path has finished.
    pub fn step_parallel(&mut self) -> Result<()> {
        let order: Vec<usize> = (0..self.paths.len()).collect();
        self.step_parallel_in(&order)
    }

    /// One lockstep round with an explicit update order (a permutation of
    /// path indices). Outputs are order-independent: paths share nothing
    /// writable within a round.
    pub fn step_parallel_in(&mut self, order: &[usize]) -> Result<()> {
        self.expect_stage(Stage::ParallelReasoning)?;
        let n = self.paths.len();
        if order.len() != n || {
            let mut seen = vec![false; n];
            order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true))
        } {
            return Err(Error::InvalidConfig(
                "order must be a permutation of path indices".into(),
            ));
        }
        if self.paths.iter().all(|p| p.finished) {
            self.enter_summary()?;
            return Ok(());
        }
        for &idx in order {
            if !self.paths[idx].finished {
                self.advance_path(idx)?;
            }
        }
        Ok(())
    }

    fn advance_path(&mut self, idx: usize) -> Result<()> {
        let k = idx + 1;
        let close = self.vocab.think_close(k)?;
        let vocab = &self.vocab;
        let sampling = self.config.sampling;
        let state = &mut self.paths[idx];
        let (token, forced) = match state.pending.pop_front() {
            Some(tok) => (tok, true),
            None => {
                let tok = sample_token(
                    &state.last_logits,
                    &|t| !vocab.is_special(t) || t == close,
                    &sampling,
                    &mut state.rng,
                );
                state.sampled += 1;
                self.sampled_logits.push(SampledLogits {
                    role: TokenRole::Path(k),
                    offset: state.emitted.len(),
                    logits: state.last_logits.clone(),
                });
                (tok, false)
            }
        };
        let pos = self.prompt.len() + state.emitted.len();
        let logits = forward_step(
            self.model,
            &mut self.store,
            &mut state.handle,
            token,
            pos,
            Some(k),
        )?;
        self.decode_steps += 1;
        state.emitted.push(Emitted { token, forced });
        state.last_logits = logits;
        if token == close {
            state.finished = true;
        } else if !forced && state.sampled >= self.config.max_path_tokens {
            // budget exhausted: force the close tag so the layout parses
            state.pending.push_back(close);
        }
        Ok(())
    }

    /// Build the summary context (merged view, or a re-prefill when cache
    /// reuse is off) and force the summary-open trigger.
    fn enter_summary(&mut self) -> Result<()> {
        let shared = self.shared.as_ref().expect("prefill ran");
        let shared_len = self.prompt.len();
        let max_path_len = self
            .paths
            .iter()
            .map(|p| p.emitted.len())
            .max()
            .unwrap_or(0);
        self.summary_start = shared_len + max_path_len;

        let view = if self.config.reuse_kv {
            let seqs: Vec<&SequenceCache> = self.paths.iter().map(|p| p.handle.seq()).collect();
            self.store.merge_for_summary(shared, &seqs)?
        } else {
            // recompute the whole merged context from raw tokens; the
            // recomputed entries are bit-identical, only the counters move
            let fresh_seq = self.store.new_sequence(TokenRole::SharedContext);
            let mut fresh = SequenceHandle::new(fresh_seq);
            for (i, &tok) in self.prompt.iter().enumerate() {
                forward_step(self.model, &mut self.store, &mut fresh, tok, i, None)?;
            }
            self.store.note_summary_prefill(shared_len);
            let (_, fresh_seq) = fresh.into_parts();
            let children = self.store.fork(&fresh_seq, self.paths.len())?;
            let mut replayed = Vec::with_capacity(children.len());
            for (i, child) in children.into_iter().enumerate() {
                let k = i + 1;
                let mut handle = SequenceHandle::new(child);
                for (o, e) in self.paths[i].emitted.iter().enumerate() {
                    forward_step(
                        self.model,
                        &mut self.store,
                        &mut handle,
                        e.token,
                        shared_len + o,
                        Some(k),
                    )?;
                }
                self.store.note_summary_prefill(self.paths[i].emitted.len());
                let (_, seq) = handle.into_parts();
                replayed.push(seq);
            }
            let refs: Vec<&SequenceCache> = replayed.iter().collect();
            let view = self.store.merge_for_summary(&fresh_seq, &refs)?;
            self.rebuilt.push(fresh_seq);
            self.rebuilt.extend(replayed);
            view
        };

        let tail = self.store.new_sequence(TokenRole::Summary);
        let mut handle = SequenceHandle::with_context(view, tail);
        let open = self.vocab.summary_open();
        let logits = forward_step(
            self.model,
            &mut self.store,
            &mut handle,
            open,
            self.summary_start,
            None,
        )?;
        self.decode_steps += 1;
        self.summary_emitted.push(Emitted {
            token: open,
            forced: true,
        });
        self.summary_last_logits = logits;
        self.summary_handle = Some(handle);
        self.stage = Stage::Summary;
        Ok(())
    }

    /// Advance the summary by one token; the close tag (sampled or forced
    /// at budget) finishes the session.
    pub fn step_summary(&mut self) -> Result<()> {
        self.expect_stage(Stage::Summary)?;
        let close = self.vocab.summary_close();
        let vocab = &self.vocab;
        let sampling = self.config.sampling;
        let (token, forced) = match self.summary_pending.pop_front() {
            Some(tok) => (tok, true),
            None => {
                let tok = sample_token(
                    &self.summary_last_logits,
                    &|t| !vocab.is_special(t) || t == close,
                    &sampling,
                    &mut self.summary_rng,
                );
                self.summary_sampled += 1;
                self.sampled_logits.push(SampledLogits {
                    role: TokenRole::Summary,
                    offset: self.summary_emitted.len(),
                    logits: self.summary_last_logits.clone(),
                });
                (tok, false)
            }
        };
        let pos = self.summary_start + self.summary_emitted.len();
        let handle = self.summary_handle.as_mut().expect("summary stage");
        let logits = forward_step(self.model, &mut self.store, handle, token, pos, None)?;
        self.decode_steps += 1;
        self.summary_emitted.push(Emitted { token, forced });
        self.summary_last_logits = logits;
        if token == close {
            self.stage = Stage::Done;
        } else if !forced && self.summary_sampled >= self.config.max_summary_tokens {
            self.summary_pending.push_back(close);
        }
        Ok(())
    }

    /// Drive the remaining stages to completion, release every cache, and
    /// assemble the transcript.
    pub fn finish(mut self) -> Result<Transcript> {
        loop {
            match self.stage {
                Stage::Prefill => self.prefill()?,
                Stage::ParallelReasoning => self.step_parallel()?,
                Stage::Summary => self.step_summary()?,
                Stage::Done => break,
            }
        }
        // release everything; the pool must drain completely
        let mut paths = Vec::with_capacity(self.paths.len());
        for state in self.paths.drain(..) {
            paths.push(state.emitted);
            self.store.release_handle(state.handle);
        }
        if let Some(handle) = self.summary_handle.take() {
            self.store.release_handle(handle);
        }
        if let Some(shared) = self.shared.take() {
            self.store.release(shared);
        }
        for seq in self.rebuilt.drain(..) {
            self.store.release(seq);
        }
        debug_assert_eq!(self.store.live_blocks(), 0, "cache leak at session end");
        Ok(Transcript {
            prompt: self.prompt,
            paths,
            summary: self.summary_emitted,
            config: self.config,
            stats: self.store.stats(),
            decode_steps: self.decode_steps,
            sampled_logits: self.sampled_logits,
        })
    }
}

/// Run one session end to end.
pub fn run(
    model: &ToyDecoder,
    config: SessionConfig,
    prompt: Vec<TokenId>,
    path_prompts: Vec<Vec<TokenId>>,
) -> Result<Transcript> {
    DecodeSession::new(model, config, prompt, path_prompts)?.finish()
}

/// Result of the majority-voting baseline.
#[derive(Debug, Clone)]
pub struct ReplicatedOutcome {
    pub transcripts: Vec<Transcript>,
    /// Most frequent boxed answer, ties broken by first occurrence.
    pub majority_answer: Option<Vec<u8>>,
    /// Counter totals across all replicas.
    pub stats: CacheStats,
}

/// `n_paths` independent single-chain decodes with distinct sampling
/// streams, followed by a majority vote over extracted boxed answers.
pub fn run_replicated(
    model: &ToyDecoder,
    config: SessionConfig,
    prompt: Vec<TokenId>,
) -> Result<ReplicatedOutcome> {
    config.validate()?;
    let n = config.n_paths;
    let base_seed = config.sampling.stream_seed();
    let vocab = SpecialVocab::desk_default();
    let mut transcripts = Vec::with_capacity(n);
    let mut stats = CacheStats::default();
    for replica in 0..n {
        let sampling = match config.sampling {
            Sampling::Greedy => Sampling::Greedy,
            Sampling::TopK { k, temperature, .. } => Sampling::TopK {
                k,
                temperature,
                seed: derive_stream(base_seed, replica as u64 + 1),
            },
        };
        let replica_config = SessionConfig {
            mode: Mode::Sequential,
            n_paths: 1,
            sampling,
            ..config.clone()
        };
        let t = run(model, replica_config, prompt.clone(), vec![Vec::new()])?;
        stats.blocks_allocated += t.stats.blocks_allocated;
        stats.blocks_shared += t.stats.blocks_shared;
        stats.prefill_tokens_computed += t.stats.prefill_tokens_computed;
        stats.summary_prefill_tokens += t.stats.summary_prefill_tokens;
        transcripts.push(t);
    }
    // vote in first-occurrence order; only a strictly greater count
    // displaces the current winner, so ties go to the earliest answer
    let mut tally: Vec<(Vec<u8>, usize)> = Vec::new();
    for t in &transcripts {
        if let Some(answer) = t.boxed_answer(&vocab) {
            match tally.iter_mut().find(|(a, _)| *a == answer) {
                Some((_, c)) => *c += 1,
                None => tally.push((answer, 1)),
            }
        }
    }
    let mut majority_answer: Option<Vec<u8>> = None;
    let mut best = 0usize;
    for (answer, count) in tally {
        if count > best {
            best = count;
            majority_answer = Some(answer);
        }
    }
    Ok(ReplicatedOutcome {
        transcripts,
        majority_answer,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::layout_from_tagged_tokens;
    use crate::model::ModelConfig;

    fn model(seed: u64) -> ToyDecoder {
        ToyDecoder::init(&ModelConfig {
            n_layers: 2,
            n_heads: 2,
            head_dim: 8,
            seed,
            ..ModelConfig::desk_default()
        })
        .unwrap()
    }

    fn small_config(n_paths: usize) -> SessionConfig {
        SessionConfig {
            n_paths,
            max_path_tokens: 6,
            max_summary_tokens: 4,
            block_size: 4,
            ..SessionConfig::default()
        }
    }

    fn prompt() -> Vec<TokenId> {
        b"count the dots".iter().map(|&b| b as TokenId).collect()
    }

    #[test]
    fn single_path_parallel_equals_sequential() {
        let m = model(3);
        let par = run(&m, small_config(1), prompt(), vec![vec![65, 66]]).unwrap();
        let seq = run(
            &m,
            SessionConfig {
                mode: Mode::Sequential,
                ..small_config(1)
            },
            prompt(),
            vec![vec![65, 66]],
        )
        .unwrap();
        assert_eq!(par.paths, seq.paths);
        assert_eq!(par.summary, seq.summary);
        assert_eq!(par.stats, seq.stats);
    }

    #[test]
    fn zero_weight_model_greedy_ties_break_low() {
        // uniform logits: the argmax rule must pick the lowest legal id (0)
        let m = ToyDecoder::zeroed(&ModelConfig {
            n_layers: 1,
            n_heads: 2,
            head_dim: 8,
            ..ModelConfig::desk_default()
        })
        .unwrap();
        let t = run(&m, small_config(2), prompt(), vec![vec![], vec![]]).unwrap();
        let vocab = SpecialVocab::desk_default();
        for (i, path) in t.paths.iter().enumerate() {
            let k = i + 1;
            assert_eq!(path[0].token, vocab.think_open(k).unwrap());
            assert!(path[0].forced);
            // all sampled tokens are id 0, then the forced close
            for e in &path[1..path.len() - 1] {
                assert_eq!(e.token, 0);
                assert!(!e.forced);
            }
            let last = path.last().unwrap();
            assert_eq!(last.token, vocab.think_close(k).unwrap());
            assert!(last.forced, "budget exhaustion must force the close");
        }
    }

    #[test]
    fn transcripts_parse_back_to_layouts() {
        let m = model(11);
        for n_paths in [1, 2, 4] {
            let t = run(
                &m,
                small_config(n_paths),
                prompt(),
                vec![Vec::new(); n_paths],
            )
            .unwrap();
            let vocab = SpecialVocab::desk_default();
            let layout = layout_from_tagged_tokens(&t.flattened_tokens(), &vocab).unwrap();
            assert_eq!(layout.n_paths(), n_paths);
            assert_eq!(layout, t.layout().unwrap());
        }
    }

    #[test]
    fn wrong_stage_calls_error() {
        let m = model(5);
        let mut session =
            DecodeSession::new(&m, small_config(1), prompt(), vec![vec![]]).unwrap();
        assert!(matches!(
            session.step_parallel(),
            Err(Error::WrongStage { .. })
        ));
        session.prefill().unwrap();
        assert!(matches!(session.prefill(), Err(Error::WrongStage { .. })));
        assert!(matches!(
            session.step_summary(),
            Err(Error::WrongStage { .. })
        ));
    }

    #[test]
    fn round_output_is_schedule_order_independent() {
        let m = model(7);
        let cfg = small_config(3);
        let pp = vec![vec![70], vec![71], vec![72]];
        let natural = run(&m, cfg.clone(), prompt(), pp.clone()).unwrap();

        let mut session = DecodeSession::new(&m, cfg, prompt(), pp).unwrap();
        session.prefill().unwrap();
        let orders = [vec![2, 0, 1], vec![1, 2, 0], vec![0, 2, 1]];
        let mut i = 0;
        while session.stage() == Stage::ParallelReasoning {
            session.step_parallel_in(&orders[i % orders.len()]).unwrap();
            i += 1;
        }
        let permuted = session.finish().unwrap();
        assert_eq!(natural.paths, permuted.paths);
        assert_eq!(natural.summary, permuted.summary);
    }

    #[test]
    fn order_must_be_a_permutation() {
        let m = model(7);
        let mut session =
            DecodeSession::new(&m, small_config(2), prompt(), vec![vec![], vec![]]).unwrap();
        session.prefill().unwrap();
        assert!(session.step_parallel_in(&[0, 0]).is_err());
        assert!(session.step_parallel_in(&[0]).is_err());
        assert!(session.step_parallel_in(&[0, 2]).is_err());
    }

    #[test]
    fn reuse_toggle_changes_counters_not_tokens() {
        let m = model(13);
        let cfg = small_config(3);
        let pp = vec![vec![80], vec![81, 82], vec![]];
        let with_reuse = run(&m, cfg.clone(), prompt(), pp.clone()).unwrap();
        let without = run(
            &m,
            SessionConfig {
                reuse_kv: false,
                ..cfg
            },
            prompt(),
            pp,
        )
        .unwrap();
        assert_eq!(with_reuse.paths, without.paths);
        assert_eq!(with_reuse.summary, without.summary);
        assert_eq!(with_reuse.stats.summary_prefill_tokens, 0);
        let shared = prompt().len() as u64;
        let path_total: u64 = without.paths.iter().map(|p| p.len() as u64).sum();
        assert_eq!(
            without.stats.summary_prefill_tokens,
            shared + path_total
        );
        assert_eq!(with_reuse.stats.prefill_tokens_computed, shared);
        assert_eq!(without.stats.prefill_tokens_computed, shared);
    }

    #[test]
    fn replicated_greedy_is_unanimous() {
        let m = model(17);
        let cfg = SessionConfig {
            mode: Mode::Replicated,
            ..small_config(4)
        };
        let outcome = run_replicated(&m, cfg, prompt()).unwrap();
        assert_eq!(outcome.transcripts.len(), 4);
        for t in &outcome.transcripts[1..] {
            assert_eq!(t.paths, outcome.transcripts[0].paths);
            assert_eq!(t.summary, outcome.transcripts[0].summary);
        }
        // the counter-level cost gap: n full prefills instead of one
        assert_eq!(
            outcome.stats.prefill_tokens_computed,
            4 * prompt().len() as u64
        );
    }

    #[test]
    fn end_to_end_path_isolation() {
        let m = model(19);
        let cfg = small_config(3);
        let a = run(
            &m,
            cfg.clone(),
            prompt(),
            vec![vec![65], vec![66], vec![67]],
        )
        .unwrap();
        let b = run(
            &m,
            cfg,
            prompt(),
            vec![vec![65], vec![120, 121, 122], vec![67]],
        )
        .unwrap();
        assert_eq!(a.paths[0], b.paths[0], "path 1 must not see path 2");
        assert_eq!(a.paths[2], b.paths[2], "path 3 must not see path 2");
        assert_ne!(a.paths[1], b.paths[1]);
    }

    #[test]
    fn greedy_transcripts_verify_exactly() {
        let m = model(23);
        let t = run(&m, small_config(2), prompt(), vec![vec![75], vec![]]).unwrap();
        let outcome = verify_transcript(&m, &t).unwrap();
        assert!(outcome.ok, "{:?}", outcome.failure);
        assert_eq!(outcome.max_abs_logit_diff, 0.0);

        // tamper with one sampled token
        let mut bad = t.clone();
        for e in bad.paths[0].iter_mut() {
            if !e.forced && e.token != SpecialVocab::desk_default().think_close(1).unwrap() {
                e.token = e.token.wrapping_add(1) % 256;
                break;
            }
        }
        let outcome = verify_transcript(&m, &bad).unwrap();
        assert!(!outcome.ok);
        assert!(outcome.failure.is_some());
    }

    #[test]
    fn top_k_transcripts_verify() {
        let m = model(29);
        let cfg = SessionConfig {
            sampling: Sampling::TopK {
                k: 8,
                temperature: 0.9,
                seed: 99,
            },
            ..small_config(2)
        };
        let t = run(&m, cfg, prompt(), vec![vec![], vec![]]).unwrap();
        let outcome = verify_transcript(&m, &t).unwrap();
        assert!(outcome.ok, "{:?}", outcome.failure);
        assert_eq!(outcome.max_abs_logit_diff, 0.0);
    }

    #[test]
    fn config_validation_errors() {
        let m = model(1);
        assert!(matches!(
            run(
                &m,
                SessionConfig {
                    max_path_tokens: 0,
                    ..small_config(1)
                },
                prompt(),
                vec![vec![]]
            ),
            Err(Error::ZeroBudget)
        ));
        assert!(matches!(
            run(&m, small_config(1), Vec::new(), vec![vec![]]),
            Err(Error::EmptyPrompt)
        ));
        assert!(run(&m, small_config(2), prompt(), vec![vec![]]).is_err());
        // prompts may not smuggle tag tokens
        let vocab = SpecialVocab::desk_default();
        assert!(run(
            &m,
            small_config(1),
            vec![1, vocab.think_open(1).unwrap()],
            vec![vec![]]
        )
        .is_err());
    }

    #[test]
    fn summary_waits_for_all_paths() {
        let m = model(31);
        let mut session = DecodeSession::new(
            &m,
            small_config(2),
            prompt(),
            vec![vec![], vec![90, 91, 92, 93]],
        )
        .unwrap();
        session.prefill().unwrap();
        while session.stage() == Stage::ParallelReasoning {
            let finished: Vec<bool> = (1..=2)
                .map(|k| {
                    session
                        .path_emitted(k)
                        .last()
                        .map(|e| {
                            e.token == SpecialVocab::desk_default().think_close(k).unwrap()
                        })
                        .unwrap_or(false)
                })
                .collect();
            if !finished.iter().all(|&f| f) {
                assert!(session.stage() != Stage::Summary);
            }
            session.step_parallel().unwrap();
        }
        assert_eq!(session.stage(), Stage::Summary);
        let t = session.finish().unwrap();
        assert!(!t.summary.is_empty());
    }
}
