//! Paged key/value storage with shared prefill, copy-on-write fork, and a
//! merged read-only view for summary decoding.
//!
//! Keys are stored post-embedding and post-rotation, values post-embedding,
//! so fork and merge are pure block bookkeeping with no re-processing.
//! Written slots are immutable; only the final block of a sequence may be
//! partially filled. The store is a single-writer structure: callers
//! synchronize externally, each sequence has exactly one writer, and merged
//! views are read-only.

use serde::{Deserialize, Serialize};

use crate::layout::{TokenRole, MAX_PATHS};
use crate::{Error, Result};

/// Handle to a block in the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockId(usize);

impl BlockId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Pool configuration.
#[derive(Debug, Clone)]
pub struct KvConfig {
    /// Slots per block. The default of 16 forces multi-block paths at desk
    /// scale so fork and merge are actually exercised.
    pub block_size: usize,
    /// Maximum number of live blocks.
    pub max_blocks: usize,
    /// Record per-block read/write events for isolation checks.
    pub log_access: bool,
}

impl Default for KvConfig {
    fn default() -> Self {
        Self {
            block_size: 16,
            max_blocks: 4096,
            log_access: false,
        }
    }
}

/// Monotone operation counters, the desk-scale stand-in for wall-clock
/// throughput measurements.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    /// Cumulative block allocations (prefill, appends, fork tail copies).
    pub blocks_allocated: u64,
    /// Blocks that entered a shared state (ref count first exceeded one).
    pub blocks_shared: u64,
    /// Tokens pushed through the model during shared prefill.
    pub prefill_tokens_computed: u64,
    /// Tokens re-computed for the summary stage; stays zero when the merged
    /// cache is reused.
    pub summary_prefill_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    Write,
}

/// One block touch, recorded when `log_access` is enabled.
#[derive(Debug, Clone, Copy)]
pub struct AccessEvent {
    pub seq: u64,
    pub block: BlockId,
    pub kind: AccessKind,
}

struct Block {
    /// Keys, `[layer][slot][dim]` row-major.
    k: Vec<f64>,
    /// Values, same layout.
    v: Vec<f64>,
    filled: usize,
    ref_count: usize,
    tag: TokenRole,
}

/// Contiguous slot range `start..end` within one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub block: BlockId,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Block list owned by one decoding sequence.
#[derive(Debug, Clone)]
pub struct SequenceCache {
    id: u64,
    role: TokenRole,
    blocks: Vec<BlockId>,
    len: usize,
    forked_from: Option<(u64, usize)>,
}

impl SequenceCache {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn role(&self) -> TokenRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    /// Spans covering token range `from..to` under the sequence's uniform
    /// block addressing (token `t` lives in block `t / block_size`, slot
    /// `t % block_size`).
    fn spans_for_range(&self, from: usize, to: usize, block_size: usize) -> Vec<Span> {
        assert!(from <= to && to <= self.len);
        let mut spans = Vec::new();
        let mut t = from;
        while t < to {
            let b = t / block_size;
            let start = t % block_size;
            let end = usize::min(block_size, start + (to - t));
            spans.push(Span {
                block: self.blocks[b],
                start,
                end,
            });
            t += end - start;
        }
        spans
    }

    pub fn spans(&self, block_size: usize) -> Vec<Span> {
        self.spans_for_range(0, self.len, block_size)
    }
}

/// Read-only concatenated view over the shared prefix and every path's
/// post-shared blocks, in path order.
#[derive(Debug)]
pub struct MergedView {
    spans: Vec<Span>,
    len: usize,
}

impl MergedView {
    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Block pool plus counters and the optional access log.
pub struct BlockStore {
    cfg: KvConfig,
    n_layers: usize,
    dim: usize,
    blocks: Vec<Option<Block>>,
    free: Vec<usize>,
    live: usize,
    stats: CacheStats,
    log: Vec<AccessEvent>,
    next_seq: u64,
}

impl BlockStore {
    pub fn new(cfg: KvConfig, n_layers: usize, dim: usize) -> Self {
        Self {
            cfg,
            n_layers,
            dim,
            blocks: Vec::new(),
            free: Vec::new(),
            live: 0,
            stats: CacheStats::default(),
            log: Vec::new(),
            next_seq: 0,
        }
    }

    pub fn block_size(&self) -> usize {
        self.cfg.block_size
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn access_log(&self) -> &[AccessEvent] {
        &self.log
    }

    /// Number of blocks currently held by at least one sequence or view.
    pub fn live_blocks(&self) -> usize {
        self.live
    }

    pub fn block_tag(&self, id: BlockId) -> Option<TokenRole> {
        self.blocks.get(id.0).and_then(|b| b.as_ref()).map(|b| b.tag)
    }

    pub fn block_ref_count(&self, id: BlockId) -> usize {
        self.blocks
            .get(id.0)
            .and_then(|b| b.as_ref())
            .map_or(0, |b| b.ref_count)
    }

    fn block(&self, id: BlockId) -> &Block {
        self.blocks[id.0].as_ref().expect("live block")
    }

    fn block_mut(&mut self, id: BlockId) -> &mut Block {
        self.blocks[id.0].as_mut().expect("live block")
    }

    fn alloc_block(&mut self, tag: TokenRole) -> Result<BlockId> {
        if self.live >= self.cfg.max_blocks {
            return Err(Error::PoolExhausted {
                capacity: self.cfg.max_blocks,
            });
        }
        let per_block = self.n_layers * self.cfg.block_size * self.dim;
        let block = Block {
            k: vec![0.0; per_block],
            v: vec![0.0; per_block],
            filled: 0,
            ref_count: 1,
            tag,
        };
        self.live += 1;
        self.stats.blocks_allocated += 1;
        let id = match self.free.pop() {
            Some(slot) => {
                self.blocks[slot] = Some(block);
                slot
            }
            None => {
                self.blocks.push(Some(block));
                self.blocks.len() - 1
            }
        };
        Ok(BlockId(id))
    }

    fn retain_block(&mut self, id: BlockId) {
        let b = self.block_mut(id);
        b.ref_count += 1;
        if b.ref_count == 2 {
            self.stats.blocks_shared += 1;
        }
    }

    fn drop_block_ref(&mut self, id: BlockId) {
        let b = self.block_mut(id);
        assert!(b.ref_count >= 1, "double release of block {id:?}");
        b.ref_count -= 1;
        if b.ref_count == 0 {
            self.blocks[id.0] = None;
            self.free.push(id.0);
            self.live -= 1;
        }
    }

    pub fn new_sequence(&mut self, role: TokenRole) -> SequenceCache {
        let id = self.next_seq;
        self.next_seq += 1;
        SequenceCache {
            id,
            role,
            blocks: Vec::new(),
            len: 0,
            forked_from: None,
        }
    }

    /// Append one token's per-layer keys and values to `seq`. A new block is
    /// allocated when the tail is full.
    pub fn append(&mut self, seq: &mut SequenceCache, k: &[Vec<f64>], v: &[Vec<f64>]) -> Result<()> {
        if k.len() != self.n_layers || v.len() != self.n_layers {
            return Err(Error::DimensionMismatch {
                expected: self.n_layers,
                got: k.len(),
            });
        }
        for layer in 0..self.n_layers {
            if k[layer].len() != self.dim || v[layer].len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: k[layer].len(),
                });
            }
        }
        let slot = seq.len % self.cfg.block_size;
        if slot == 0 {
            let id = self.alloc_block(seq.role)?;
            seq.blocks.push(id);
        }
        let id = *seq.blocks.last().expect("tail block");
        debug_assert_eq!(
            self.block(id).ref_count,
            1,
            "appending into a shared block"
        );
        let bs = self.cfg.block_size;
        let dim = self.dim;
        let block = self.block_mut(id);
        for layer in 0..k.len() {
            let base = layer * bs * dim + slot * dim;
            block.k[base..base + dim].copy_from_slice(&k[layer]);
            block.v[base..base + dim].copy_from_slice(&v[layer]);
        }
        block.filled = slot + 1;
        seq.len += 1;
        if self.cfg.log_access {
            self.log.push(AccessEvent {
                seq: seq.id,
                block: id,
                kind: AccessKind::Write,
            });
        }
        Ok(())
    }

    /// Fork `shared` into `n` path sequences. Full blocks are shared by
    /// reference; a partially filled tail block is copied per fork so each
    /// child owns a writable tail.
    pub fn fork(&mut self, shared: &SequenceCache, n: usize) -> Result<Vec<SequenceCache>> {
        if n == 0 || n > MAX_PATHS {
            return Err(Error::TooManyPaths {
                requested: n,
                max: MAX_PATHS,
            });
        }
        let bs = self.cfg.block_size;
        let full_blocks = shared.len / bs;
        let tail_filled = shared.len % bs;
        let mut children = Vec::with_capacity(n);
        for path in 1..=n {
            let mut blocks = Vec::with_capacity(shared.blocks.len());
            for &b in &shared.blocks[..full_blocks] {
                self.retain_block(b);
                blocks.push(b);
            }
            if tail_filled > 0 {
                let src = shared.blocks[full_blocks];
                let copy_id = self.alloc_block(TokenRole::Path(path))?;
                let (k_copy, v_copy) = {
                    let src_block = self.block(src);
                    (src_block.k.clone(), src_block.v.clone())
                };
                let dst = self.block_mut(copy_id);
                dst.k = k_copy;
                dst.v = v_copy;
                dst.filled = tail_filled;
                blocks.push(copy_id);
                if self.cfg.log_access {
                    self.log.push(AccessEvent {
                        seq: shared.id,
                        block: copy_id,
                        kind: AccessKind::Write,
                    });
                }
            }
            let id = self.next_seq;
            self.next_seq += 1;
            children.push(SequenceCache {
                id,
                role: TokenRole::Path(path),
                blocks,
                len: shared.len,
                forked_from: Some((shared.id, shared.len)),
            });
        }
        Ok(children)
    }

    /// Build the read-only summary view: the shared prefix followed by each
    /// path's post-shared tokens in path order. No key/value bytes move and
    /// nothing is recomputed.
    pub fn merge_for_summary(
        &mut self,
        shared: &SequenceCache,
        paths: &[&SequenceCache],
    ) -> Result<MergedView> {
        let bs = self.cfg.block_size;
        let mut spans = shared.spans_for_range(0, shared.len, bs);
        let mut len = shared.len;
        for path in paths {
            match path.forked_from {
                Some((id, at)) if id == shared.id && at == shared.len => {}
                _ => {
                    return Err(Error::NotForkedFromShared {
                        seq: path.id,
                        shared: shared.id,
                    });
                }
            }
            spans.extend(path.spans_for_range(shared.len, path.len, bs));
            len += path.len - shared.len;
        }
        for span in &spans {
            self.retain_block(span.block);
        }
        Ok(MergedView { spans, len })
    }

    /// Return a sequence's blocks to the pool.
    pub fn release(&mut self, seq: SequenceCache) {
        for b in seq.blocks {
            self.drop_block_ref(b);
        }
    }

    /// Drop a merged view's block references.
    pub fn release_view(&mut self, view: MergedView) {
        for span in view.spans {
            self.drop_block_ref(span.block);
        }
    }

    /// Keys and values of one slot at one layer.
    #[inline]
    pub fn kv_at(&self, id: BlockId, layer: usize, slot: usize) -> (&[f64], &[f64]) {
        let bs = self.cfg.block_size;
        let dim = self.dim;
        let block = self.block(id);
        debug_assert!(slot < block.filled, "reading an unwritten slot");
        let base = layer * bs * dim + slot * dim;
        (
            &block.k[base..base + dim],
            &block.v[base..base + dim],
        )
    }

    pub(crate) fn log_reads(&mut self, seq: u64, blocks: impl IntoIterator<Item = BlockId>) {
        if !self.cfg.log_access {
            return;
        }
        for block in blocks {
            self.log.push(AccessEvent {
                seq,
                block,
                kind: AccessKind::Read,
            });
        }
    }

    pub(crate) fn note_prefill(&mut self, tokens: usize) {
        self.stats.prefill_tokens_computed += tokens as u64;
    }

    pub(crate) fn note_summary_prefill(&mut self, tokens: usize) {
        self.stats.summary_prefill_tokens += tokens as u64;
    }
}

/// A writable sequence plus an optional read-only context view; the unit the
/// incremental forward pass advances.
#[derive(Debug)]
pub struct SequenceHandle {
    context: Option<MergedView>,
    seq: SequenceCache,
    last_pos: Option<usize>,
}

impl SequenceHandle {
    pub fn new(seq: SequenceCache) -> Self {
        Self {
            context: None,
            seq,
            last_pos: None,
        }
    }

    /// Wrap a merged view as read-only context; appended tokens go to `seq`.
    pub fn with_context(context: MergedView, seq: SequenceCache) -> Self {
        Self {
            context: Some(context),
            seq,
            last_pos: None,
        }
    }

    pub fn seq(&self) -> &SequenceCache {
        &self.seq
    }

    pub(crate) fn seq_mut(&mut self) -> &mut SequenceCache {
        &mut self.seq
    }

    pub fn context_len(&self) -> usize {
        self.context.as_ref().map_or(0, MergedView::len)
    }

    /// Cached tokens visible to the next step, in flattened order.
    pub fn total_len(&self) -> usize {
        self.context_len() + self.seq.len
    }

    /// Spans over everything cached so far: context first, then own blocks.
    pub fn visible_spans(&self, block_size: usize) -> Vec<Span> {
        let mut spans = self
            .context
            .as_ref()
            .map_or_else(Vec::new, |c| c.spans().to_vec());
        spans.extend(self.seq.spans(block_size));
        spans
    }

    pub(crate) fn check_advance(&mut self, pos: usize) -> Result<()> {
        if let Some(last) = self.last_pos {
            if pos <= last {
                return Err(Error::PositionRegression { last, new: pos });
            }
        }
        self.last_pos = Some(pos);
        Ok(())
    }

    /// Split the handle back into its parts for release.
    pub fn into_parts(self) -> (Option<MergedView>, SequenceCache) {
        (self.context, self.seq)
    }
}

impl BlockStore {
    /// Release a handle's view and sequence in one call.
    pub fn release_handle(&mut self, handle: SequenceHandle) {
        let (view, seq) = handle.into_parts();
        if let Some(view) = view {
            self.release_view(view);
        }
        self.release(seq);
    }
}

/// Run the shared-context tokens through the model once, producing the
/// prefix cache every path forks from. The cached entries equal the shared
/// rows of the monolithic forward pass; `prefill_tokens_computed` grows by
/// the token count.
pub fn prefill_shared(
    store: &mut BlockStore,
    model: &crate::model::ToyDecoder,
    tokens: &[crate::layout::TokenId],
    plan: &crate::rope::PositionPlan,
) -> Result<SequenceCache> {
    let seq = store.new_sequence(TokenRole::SharedContext);
    let mut handle = SequenceHandle::new(seq);
    for (i, &token) in tokens.iter().enumerate() {
        crate::model::forward_step(model, store, &mut handle, token, plan.pos(i), plan.path_of(i))?;
    }
    store.note_prefill(tokens.len());
    let (_, seq) = handle.into_parts();
    Ok(seq)
}
