//! Three-segment token structure: shared context, parallel reasoning paths,
//! summary.
//!
//! The flattened order of a sequence is always shared context, then the
//! paths concatenated in ascending path order, then the summary. Tag tokens
//! belong to the segment they open or close, so a think-open token is the
//! first token of its path and a summary-close token is the last token of
//! the summary.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Token identifier. The desk-scale tokenizer maps bytes to ids `0..256`
/// and places special tokens immediately above.
pub type TokenId = u32;

/// Hard bound on the number of parallel paths the special vocabulary covers.
pub const MAX_PATHS: usize = 16;

/// Segment membership of a single token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenRole {
    SharedContext,
    /// 1-based path index.
    Path(usize),
    Summary,
}

impl TokenRole {
    /// Path index carried by the role, if any.
    pub fn path_index(&self) -> Option<usize> {
        match self {
            TokenRole::Path(k) => Some(*k),
            _ => None,
        }
    }
}

impl std::fmt::Display for TokenRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TokenRole::SharedContext => write!(f, "shared"),
            TokenRole::Path(k) => write!(f, "path{k}"),
            TokenRole::Summary => write!(f, "summary"),
        }
    }
}

/// Lengths of the shared context, each reasoning path, and the summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLayout {
    shared_len: usize,
    path_lens: Vec<usize>,
    summary_len: usize,
}

impl SegmentLayout {
    pub fn new(shared_len: usize, path_lens: Vec<usize>, summary_len: usize) -> Result<Self> {
        if path_lens.is_empty() {
            return Err(Error::InvalidLayout("at least one path required".into()));
        }
        if path_lens.len() > MAX_PATHS {
            return Err(Error::TooManyPaths {
                requested: path_lens.len(),
                max: MAX_PATHS,
            });
        }
        if let Some(k) = path_lens.iter().position(|&l| l == 0) {
            return Err(Error::InvalidLayout(format!(
                "path {} is empty (a path holds at least its open tag)",
                k + 1
            )));
        }
        Ok(Self {
            shared_len,
            path_lens,
            summary_len,
        })
    }

    pub fn shared_len(&self) -> usize {
        self.shared_len
    }

    pub fn n_paths(&self) -> usize {
        self.path_lens.len()
    }

    pub fn path_lens(&self) -> &[usize] {
        &self.path_lens
    }

    /// Length of path `k` (1-based).
    pub fn path_len(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.path_lens.len() {
            return Err(Error::UnknownPath {
                path: k,
                n_paths: self.path_lens.len(),
            });
        }
        Ok(self.path_lens[k - 1])
    }

    pub fn summary_len(&self) -> usize {
        self.summary_len
    }

    pub fn total(&self) -> usize {
        self.shared_len + self.path_lens.iter().sum::<usize>() + self.summary_len
    }

    /// Flattened index of the first token of path `k` (1-based).
    pub fn path_start(&self, k: usize) -> Result<usize> {
        self.path_len(k)?;
        Ok(self.shared_len + self.path_lens[..k - 1].iter().sum::<usize>())
    }

    /// Flattened index of the first summary token.
    pub fn summary_start(&self) -> usize {
        self.shared_len + self.path_lens.iter().sum::<usize>()
    }

    /// Segment containing the flattened `index`.
    pub fn role_of(&self, index: usize) -> Result<TokenRole> {
        let total = self.total();
        if index >= total {
            return Err(Error::IndexOutOfRange { index, len: total });
        }
        if index < self.shared_len {
            return Ok(TokenRole::SharedContext);
        }
        let mut cursor = self.shared_len;
        for (i, &len) in self.path_lens.iter().enumerate() {
            if index < cursor + len {
                return Ok(TokenRole::Path(i + 1));
            }
            cursor += len;
        }
        Ok(TokenRole::Summary)
    }

    /// Flattened index of the token at `offset` within the segment `role`.
    /// Inverse of [`SegmentLayout::role_of`] paired with the within-segment
    /// offset.
    pub fn flat_index(&self, role: TokenRole, offset: usize) -> Result<usize> {
        let (start, len) = match role {
            TokenRole::SharedContext => (0, self.shared_len),
            TokenRole::Path(k) => (self.path_start(k)?, self.path_len(k)?),
            TokenRole::Summary => (self.summary_start(), self.summary_len),
        };
        if offset >= len {
            return Err(Error::OffsetOutOfRange { offset, len });
        }
        Ok(start + offset)
    }
}

/// Classified special token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecialToken {
    ThinkOpen(usize),
    ThinkClose(usize),
    SummaryOpen,
    SummaryClose,
    Pad,
}

/// Special-token id assignment shared by the parser, the data builder and
/// the engine. Think tags exist for paths `1..=MAX_PATHS`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialVocab {
    pad: TokenId,
    summary_open: TokenId,
    summary_close: TokenId,
    think_base: TokenId,
    boxed_open: Vec<u8>,
    boxed_close: Vec<u8>,
}

impl SpecialVocab {
    /// Desk-scale assignment: byte tokens occupy `0..256`, specials follow.
    pub fn desk_default() -> Self {
        Self {
            pad: 256,
            summary_open: 257,
            summary_close: 258,
            think_base: 259,
            boxed_open: b"\\boxed{".to_vec(),
            boxed_close: b"}".to_vec(),
        }
    }

    pub fn pad(&self) -> TokenId {
        self.pad
    }

    pub fn summary_open(&self) -> TokenId {
        self.summary_open
    }

    pub fn summary_close(&self) -> TokenId {
        self.summary_close
    }

    pub fn think_open(&self, k: usize) -> Result<TokenId> {
        if k == 0 || k > MAX_PATHS {
            return Err(Error::UnknownPath {
                path: k,
                n_paths: MAX_PATHS,
            });
        }
        Ok(self.think_base + 2 * (k as TokenId - 1))
    }

    pub fn think_close(&self, k: usize) -> Result<TokenId> {
        Ok(self.think_open(k)? + 1)
    }

    pub fn boxed_open(&self) -> &[u8] {
        &self.boxed_open
    }

    pub fn boxed_close(&self) -> &[u8] {
        &self.boxed_close
    }

    /// Largest special token id in use.
    pub fn max_special_id(&self) -> TokenId {
        self.think_base + 2 * MAX_PATHS as TokenId - 1
    }

    /// Check that every special id fits below the model vocabulary.
    pub fn validate_vocab(&self, vocab_size: usize) -> Result<()> {
        let needed = self.max_special_id();
        if (needed as usize) >= vocab_size {
            return Err(Error::VocabTooSmall { needed, vocab_size });
        }
        Ok(())
    }

    pub fn classify(&self, token: TokenId) -> Option<SpecialToken> {
        if token == self.pad {
            return Some(SpecialToken::Pad);
        }
        if token == self.summary_open {
            return Some(SpecialToken::SummaryOpen);
        }
        if token == self.summary_close {
            return Some(SpecialToken::SummaryClose);
        }
        if token >= self.think_base && token < self.think_base + 2 * MAX_PATHS as TokenId {
            let rel = token - self.think_base;
            let k = (rel / 2) as usize + 1;
            return if rel % 2 == 0 {
                Some(SpecialToken::ThinkOpen(k))
            } else {
                Some(SpecialToken::ThinkClose(k))
            };
        }
        None
    }

    pub fn is_special(&self, token: TokenId) -> bool {
        self.classify(token).is_some()
    }
}

enum ParseState {
    Shared,
    InPath(usize),
    BetweenPaths,
    InSummary,
    Done,
}

/// Recover a [`SegmentLayout`] from a tagged token stream.
///
/// The stream must consist of an untagged shared prefix, think blocks for
/// paths `1..=n` in ascending order, and an optional trailing summary block.
/// Tag tokens count inside the segment they delimit, so slicing the stream
/// by the returned lengths reproduces it exactly.
pub fn layout_from_tagged_tokens(tokens: &[TokenId], vocab: &SpecialVocab) -> Result<SegmentLayout> {
    let mut state = ParseState::Shared;
    let mut shared_len = 0usize;
    let mut path_lens: Vec<usize> = Vec::new();
    let mut summary_len = 0usize;

    for &tok in tokens {
        let special = vocab.classify(tok);
        state = match (state, special) {
            (ParseState::Shared, Some(SpecialToken::ThinkOpen(k))) => {
                if k != 1 {
                    return Err(Error::PathIndexOutOfOrder { expected: 1, got: k });
                }
                path_lens.push(1);
                ParseState::InPath(k)
            }
            (ParseState::Shared, Some(SpecialToken::SummaryOpen)) => {
                // A summary with no preceding think block cannot be
                // represented: paths are mandatory.
                return Err(Error::NoPaths);
            }
            (ParseState::Shared, Some(SpecialToken::ThinkClose(k))) => {
                return Err(Error::UnbalancedTag(format!(
                    "close tag for path {k} with no open tag"
                )));
            }
            (ParseState::Shared, Some(SpecialToken::SummaryClose)) => {
                return Err(Error::UnbalancedTag(
                    "summary close with no summary open".into(),
                ));
            }
            (ParseState::Shared, _) => {
                shared_len += 1;
                ParseState::Shared
            }

            (ParseState::InPath(cur), Some(SpecialToken::ThinkOpen(k))) => {
                if k == cur {
                    return Err(Error::DuplicatePathIndex(k));
                }
                return Err(Error::InterleavedPath(k, cur));
            }
            (ParseState::InPath(cur), Some(SpecialToken::ThinkClose(k))) => {
                if k != cur {
                    return Err(Error::UnbalancedTag(format!(
                        "close tag for path {k} inside path {cur}"
                    )));
                }
                *path_lens.last_mut().expect("open path") += 1;
                ParseState::BetweenPaths
            }
            (ParseState::InPath(cur), Some(SpecialToken::SummaryOpen)) => {
                return Err(Error::UnbalancedTag(format!(
                    "summary open inside path {cur}"
                )));
            }
            (ParseState::InPath(cur), _) => {
                *path_lens.last_mut().expect("open path") += 1;
                ParseState::InPath(cur)
            }

            (ParseState::BetweenPaths, Some(SpecialToken::ThinkOpen(k))) => {
                let expected = path_lens.len() + 1;
                if k <= path_lens.len() {
                    return Err(Error::DuplicatePathIndex(k));
                }
                if k != expected {
                    return Err(Error::PathIndexOutOfOrder { expected, got: k });
                }
                path_lens.push(1);
                ParseState::InPath(k)
            }
            (ParseState::BetweenPaths, Some(SpecialToken::SummaryOpen)) => {
                summary_len = 1;
                ParseState::InSummary
            }
            (ParseState::BetweenPaths, Some(SpecialToken::ThinkClose(k))) => {
                return Err(Error::UnbalancedTag(format!(
                    "close tag for path {k} with no open tag"
                )));
            }
            (ParseState::BetweenPaths, _) => {
                return Err(Error::InvalidLayout(
                    "token outside any segment between think blocks".into(),
                ));
            }

            (ParseState::InSummary, Some(SpecialToken::ThinkOpen(_))) => {
                return Err(Error::ThinkAfterSummary);
            }
            (ParseState::InSummary, Some(SpecialToken::SummaryClose)) => {
                summary_len += 1;
                ParseState::Done
            }
            (ParseState::InSummary, Some(SpecialToken::SummaryOpen)) => {
                return Err(Error::UnbalancedTag("nested summary open".into()));
            }
            (ParseState::InSummary, _) => {
                summary_len += 1;
                ParseState::InSummary
            }

            (ParseState::Done, Some(SpecialToken::ThinkOpen(_))) => {
                return Err(Error::ThinkAfterSummary);
            }
            (ParseState::Done, _) => {
                return Err(Error::TrailingTokens);
            }
        };
    }

    match state {
        ParseState::Shared => Err(Error::NoPaths),
        ParseState::InPath(k) => Err(Error::UnbalancedTag(format!("path {k} never closed"))),
        ParseState::InSummary => Err(Error::UnbalancedTag("summary never closed".into())),
        ParseState::BetweenPaths | ParseState::Done => {
            SegmentLayout::new(shared_len, path_lens, summary_len)
        }
    }
}
