//! Visual-partitioning combinatorics and tagged training-sample
//! construction.
//!
//! Images stand in as pseudo token grids. Quadrant partitioning and scan
//! orders are pure index arithmetic; samples are rendered with the byte
//! tokenizer (one token per byte, specials above 255) so round-trips are
//! exact.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::layout::{layout_from_tagged_tokens, SpecialVocab, TokenId};
use crate::{Error, Result};

/// Pseudo visual-token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidConfig(format!(
                "grid dimensions must be positive, got {h}x{w}"
            )));
        }
        Ok(Self { h, w })
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::TopLeft,
        Quadrant::TopRight,
        Quadrant::BottomLeft,
        Quadrant::BottomRight,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Quadrant::TopLeft => "Top-Left",
            Quadrant::TopRight => "Top-Right",
            Quadrant::BottomLeft => "Bottom-Left",
            Quadrant::BottomRight => "Bottom-Right",
        }
    }
}

/// Non-empty set of grid cells focused by one path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub label: Quadrant,
    pub cells: Vec<(usize, usize)>,
}

/// Scanning directions for the traversal-based strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanOrder {
    LeftToRight,
    TopToBottom,
    RightToLeft,
    BottomToTop,
}

impl ScanOrder {
    pub const ALL: [ScanOrder; 4] = [
        ScanOrder::LeftToRight,
        ScanOrder::TopToBottom,
        ScanOrder::RightToLeft,
        ScanOrder::BottomToTop,
    ];

    pub fn instruction(&self) -> &'static str {
        match self {
            ScanOrder::LeftToRight => "Scanning Left-to-Right",
            ScanOrder::TopToBottom => "Scanning Top-to-Bottom",
            ScanOrder::RightToLeft => "Scanning Right-to-Left",
            ScanOrder::BottomToTop => "Scanning Bottom-to-Top",
        }
    }
}

/// Task families used to pick a partitioning strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Counting,
    Grounding,
    Perception,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    BlockBased,
    ScanOrder,
}

/// Quadrants split at `ceil(h/2)` and `ceil(w/2)`, top-left taking the
/// larger share on odd dimensions. Grids smaller than 2x2 would leave a
/// quadrant empty and are rejected.
pub fn block_partition(grid: TokenGrid) -> Result<[Region; 4]> {
    if grid.h < 2 || grid.w < 2 {
        return Err(Error::DegenerateGrid {
            h: grid.h,
            w: grid.w,
        });
    }
    let row_split = grid.h.div_ceil(2);
    let col_split = grid.w.div_ceil(2);
    let mut regions = Quadrant::ALL.map(|label| Region {
        label,
        cells: Vec::new(),
    });
    for r in 0..grid.h {
        for c in 0..grid.w {
            let idx = match (r < row_split, c < col_split) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            regions[idx].cells.push((r, c));
        }
    }
    Ok(regions)
}

/// Bijective traversal of the grid's row-major cell indices.
pub fn scan_permutation(grid: TokenGrid, order: ScanOrder) -> Vec<usize> {
    let (h, w) = (grid.h, grid.w);
    let mut out = Vec::with_capacity(h * w);
    match order {
        ScanOrder::LeftToRight => {
            for r in 0..h {
                for c in 0..w {
                    out.push(r * w + c);
                }
            }
        }
        ScanOrder::TopToBottom => {
            for c in 0..w {
                for r in 0..h {
                    out.push(r * w + c);
                }
            }
        }
        ScanOrder::RightToLeft => {
            for r in 0..h {
                for c in (0..w).rev() {
                    out.push(r * w + c);
                }
            }
        }
        ScanOrder::BottomToTop => {
            for c in 0..w {
                for r in (0..h).rev() {
                    out.push(r * w + c);
                }
            }
        }
    }
    out
}

/// Counting tasks scan; everything else partitions into blocks.
pub fn select_strategy(task: TaskKind) -> Strategy {
    match task {
        TaskKind::Counting => Strategy::ScanOrder,
        TaskKind::Grounding | TaskKind::Perception | TaskKind::Other => Strategy::BlockBased,
    }
}

/// Byte tokenizer: each byte maps to its own token id.
pub fn encode_bytes(text: &[u8]) -> Vec<TokenId> {
    text.iter().map(|&b| b as TokenId).collect()
}

/// Inverse of [`encode_bytes`]; non-byte (special) ids are skipped.
pub fn decode_bytes(tokens: &[TokenId]) -> Vec<u8> {
    tokens
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect()
}

/// Number of reasoning paths every constructed sample carries.
pub const SAMPLE_PATHS: usize = 4;

/// One tagged training sample with its per-target loss mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftSample {
    pub question: String,
    pub paths: Vec<String>,
    pub summary: String,
    pub answer: String,
    pub token_ids: Vec<TokenId>,
    /// One bit per target position: 0 on the user turn, the pad, and each
    /// think-open tag; 1 elsewhere in the assistant output.
    pub loss_mask: Vec<u8>,
}

/// Assemble the tagged token stream for one sample: user turn, pad, four
/// think blocks, then a summary carrying the boxed answer. Think-open
/// targets are masked from the loss and serve only as structural triggers;
/// close tags stay in the loss.
pub fn build_sample(
    question: &str,
    path_texts: &[String],
    answer: &str,
    vocab: &SpecialVocab,
) -> Result<SftSample> {
    if path_texts.len() != SAMPLE_PATHS {
        return Err(Error::InvalidConfig(format!(
            "expected {SAMPLE_PATHS} path texts, got {}",
            path_texts.len()
        )));
    }
    if path_texts.iter().any(|t| t.is_empty()) {
        return Err(Error::EmptyPathText);
    }
    if answer.is_empty() {
        return Err(Error::InvalidConfig("answer must be non-empty".into()));
    }
    let delimiter_bytes = [vocab.boxed_open(), vocab.boxed_close()];
    if delimiter_bytes
        .iter()
        .any(|d| answer.as_bytes().windows(d.len()).any(|w| w == *d))
    {
        return Err(Error::AnswerContainsDelimiter);
    }

    let summary = format!(
        "By analyzing the reasoning paths above, the final answer is \\boxed{{{answer}}}."
    );
    let mut token_ids = encode_bytes(question.as_bytes());
    let mut loss_mask = vec![0u8; token_ids.len()];
    token_ids.push(vocab.pad());
    loss_mask.push(0);
    for (i, text) in path_texts.iter().enumerate() {
        let k = i + 1;
        token_ids.push(vocab.think_open(k)?);
        loss_mask.push(0);
        for t in encode_bytes(text.as_bytes()) {
            token_ids.push(t);
            loss_mask.push(1);
        }
        token_ids.push(vocab.think_close(k)?);
        loss_mask.push(1);
    }
    token_ids.push(vocab.summary_open());
    loss_mask.push(1);
    for t in encode_bytes(summary.as_bytes()) {
        token_ids.push(t);
        loss_mask.push(1);
    }
    token_ids.push(vocab.summary_close());
    loss_mask.push(1);

    let sample = SftSample {
        question: question.to_string(),
        paths: path_texts.to_vec(),
        summary,
        answer: answer.to_string(),
        token_ids,
        loss_mask,
    };
    debug_assert!(layout_from_tagged_tokens(&sample.token_ids, vocab).is_ok());
    Ok(sample)
}

/// Write one JSON record per sample; field order and float-free content make
/// the output byte-stable across runs.
pub fn emit_records<W: Write>(samples: &[SftSample], sink: &mut W) -> Result<usize> {
    for sample in samples {
        serde_json::to_writer(&mut *sink, sample)
            .map_err(|e| Error::BadRecord(e.to_string()))?;
        sink.write_all(b"\n")?;
    }
    Ok(samples.len())
}

/// Read records produced by [`emit_records`].
pub fn parse_records<R: BufRead>(reader: R) -> Result<Vec<SftSample>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::BadRecord(e.to_string()))?);
    }
    Ok(out)
}

/// Plain-text dump of a partition for debugging: one letter per cell.
pub fn region_ascii(grid: TokenGrid, regions: &[Region]) -> String {
    let mut canvas = vec![vec!['.'; grid.w]; grid.h];
    for region in regions {
        let ch = match region.label {
            Quadrant::TopLeft => 'A',
            Quadrant::TopRight => 'B',
            Quadrant::BottomLeft => 'C',
            Quadrant::BottomRight => 'D',
        };
        for &(r, c) in &region.cells {
            canvas[r][c] = ch;
        }
    }
    let mut out = String::new();
    for row in canvas {
        out.extend(row);
        out.push('\n');
    }
    out
}

/// Deterministic toy samples for the dataset command: counting questions get
/// scan-order paths, the rest get quadrant descriptions.
pub fn demo_samples(count: usize, vocab: &SpecialVocab) -> Result<Vec<SftSample>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let task = match i % 3 {
            0 => TaskKind::Counting,
            1 => TaskKind::Grounding,
            _ => TaskKind::Perception,
        };
        let n = 2 + (i % 7);
        let sample = match select_strategy(task) {
            Strategy::ScanOrder => {
                let question = format!("How many markers are in image {i}?");
                let paths: Vec<String> = ScanOrder::ALL
                    .iter()
                    .map(|o| format!("{}: counted {n} markers.", o.instruction()))
                    .collect();
                build_sample(&question, &paths, &n.to_string(), vocab)?
            }
            Strategy::BlockBased => {
                let question = format!("What occupies the highlighted cell in image {i}?");
                let paths: Vec<String> = Quadrant::ALL
                    .iter()
                    .map(|q| format!("{}: region {} holds marker {n}.", q.label(), q.label()))
                    .collect();
                build_sample(&question, &paths, &format!("marker {n}"), vocab)?
            }
        };
        out.push(sample);
    }
    Ok(out)
}
