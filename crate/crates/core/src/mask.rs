//! Path-isolating attention visibility.
//!
//! A token sees the shared context and its own path; summary tokens see
//! everything before them. The mask combines that visibility rule with
//! strict causality and is materialized densely (bitset rows): the
//! monolithic oracle forward needs arbitrary-pattern masking and desk-scale
//! sequences stay in the low thousands of tokens.

use crate::layout::{SegmentLayout, TokenRole};
use crate::Result;

/// Dense boolean visibility matrix. Row `i` is the attending token, column
/// `j` the attended token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathMask {
    n: usize,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl PathMask {
    fn empty(n: usize) -> Self {
        let words_per_row = n.div_ceil(64);
        Self {
            n,
            words_per_row,
            bits: vec![0; n * words_per_row],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        debug_assert!(i < self.n && j < self.n);
        let word = self.bits[i * self.words_per_row + j / 64];
        word >> (j % 64) & 1 == 1
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize) {
        self.bits[i * self.words_per_row + j / 64] |= 1 << (j % 64);
    }

    /// Number of visible (i, j) pairs.
    pub fn popcount(&self) -> u64 {
        self.bits.iter().map(|w| w.count_ones() as u64).sum()
    }
}

/// Visibility of token `j` to token `i` under the path-isolation rule,
/// ignoring causality: visible iff `j` is shared context, or `i` is a
/// summary token, or both live in the same path.
pub fn is_visible(layout: &SegmentLayout, i: usize, j: usize) -> Result<bool> {
    let role_i = layout.role_of(i)?;
    let role_j = layout.role_of(j)?;
    Ok(match (role_i, role_j) {
        (_, TokenRole::SharedContext) => true,
        (TokenRole::Summary, _) => true,
        (TokenRole::Path(a), TokenRole::Path(b)) => a == b,
        _ => false,
    })
}

/// Build the full mask: `bits[i][j] = (j <= i) && is_visible(i, j)`.
pub fn build_path_mask(layout: &SegmentLayout) -> PathMask {
    let n = layout.total();
    let mut mask = PathMask::empty(n);
    let mut roles = Vec::with_capacity(n);
    for idx in 0..n {
        roles.push(layout.role_of(idx).expect("index in range"));
    }
    for i in 0..n {
        for j in 0..=i {
            let visible = match (roles[i], roles[j]) {
                (_, TokenRole::SharedContext) => true,
                (TokenRole::Summary, _) => true,
                (TokenRole::Path(a), TokenRole::Path(b)) => a == b,
                _ => false,
            };
            if visible {
                mask.set(i, j);
            }
        }
    }
    mask
}

/// Plain lower-triangular causal mask, the single-path baseline.
pub fn build_causal_mask(n: usize) -> PathMask {
    let mut mask = PathMask::empty(n);
    for i in 0..n {
        for j in 0..=i {
            mask.set(i, j);
        }
    }
    mask
}

/// Render the mask as a binary PGM ("P5") image, one pixel per cell:
/// visible = 255, hidden = 0.
pub fn mask_to_pgm(mask: &PathMask) -> Vec<u8> {
    let n = mask.n();
    let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
    out.reserve(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(if mask.get(i, j) { 0xFF } else { 0x00 });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::SegmentLayout;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn layout(shared: usize, paths: &[usize], summary: usize) -> SegmentLayout {
        SegmentLayout::new(shared, paths.to_vec(), summary).unwrap()
    }

    /// Independent re-implementation of the visibility rule used as the
    /// cell-by-cell oracle: classify both indices by linear scan and apply
    /// the three cases directly.
    fn naive_visible(shared: usize, paths: &[usize], total: usize, i: usize, j: usize) -> bool {
        let class = |idx: usize| -> isize {
            if idx < shared {
                return -1; // shared
            }
            let mut cursor = shared;
            for (p, &len) in paths.iter().enumerate() {
                if idx < cursor + len {
                    return p as isize; // path p (0-based)
                }
                cursor += len;
            }
            assert!(idx < total);
            isize::MAX // summary
        };
        if j > i {
            return false;
        }
        class(j) == -1 || class(i) == isize::MAX || class(i) == class(j)
    }

    #[test]
    fn visibility_cases() {
        let l = layout(2, &[2, 2], 1);
        // cross-path
        assert!(!is_visible(&l, 4, 2).unwrap());
        // summary sees paths
        assert!(is_visible(&l, 6, 3).unwrap());
        // shared context visible to all
        assert!(is_visible(&l, 3, 0).unwrap());
        assert!(is_visible(&l, 7, 0).is_err());
    }

    #[test]
    fn pa_mask_popcount_regression() {
        let m = build_path_mask(&layout(2, &[2, 2], 1));
        assert_eq!(m.popcount(), 24);
    }

    #[test]
    fn single_path_equals_causal() {
        let l = layout(3, &[4], 2);
        let pa = build_path_mask(&l);
        let causal = build_causal_mask(l.total());
        assert_eq!(pa, causal);
    }

    #[test]
    fn degenerate_single_token() {
        let m = build_path_mask(&layout(0, &[1], 0));
        assert_eq!(m.n(), 1);
        assert!(m.get(0, 0));
        assert_eq!(m.popcount(), 1);
    }

    #[test]
    fn causal_popcounts() {
        assert_eq!(build_causal_mask(0).popcount(), 0);
        assert_eq!(build_causal_mask(1).popcount(), 1);
        assert_eq!(build_causal_mask(3).popcount(), 6);
    }

    #[test]
    fn pgm_bytes() {
        let single = build_path_mask(&layout(0, &[1], 0));
        assert_eq!(mask_to_pgm(&single), b"P5\n1 1\n255\n\xff".to_vec());

        let causal2 = build_causal_mask(2);
        let img = mask_to_pgm(&causal2);
        assert_eq!(&img[..img.len() - 4], b"P5\n2 2\n255\n");
        assert_eq!(&img[img.len() - 4..], &[0xFF, 0x00, 0xFF, 0xFF]);

        // summary row of the (2,[2,2],1) mask is all visible
        let pa = build_path_mask(&layout(2, &[2, 2], 1));
        let img = mask_to_pgm(&pa);
        let pixels = &img[b"P5\n7 7\n255\n".len()..];
        assert!(pixels[6 * 7..7 * 7].iter().all(|&b| b == 0xFF));
    }

    #[test]
    fn matches_naive_oracle_on_random_layouts() {
        let mut rng = SplitMix64::new(0xA11CE);
        for _ in 0..50 {
            let shared = rng.next_below(5);
            let n_paths = 1 + rng.next_below(4);
            let paths: Vec<usize> = (0..n_paths).map(|_| 1 + rng.next_below(4)).collect();
            let summary = rng.next_below(4);
            let l = layout(shared, &paths, summary);
            let m = build_path_mask(&l);
            for i in 0..l.total() {
                for j in 0..l.total() {
                    assert_eq!(
                        m.get(i, j),
                        naive_visible(shared, &paths, l.total(), i, j),
                        "mismatch at ({i},{j}) for layout {l:?}"
                    );
                }
            }
        }
    }

    proptest! {
        #[test]
        fn structural_invariants(
            shared in 0usize..5,
            lens in prop::collection::vec(1usize..5, 1..5),
            summary in 0usize..4,
        ) {
            let l = SegmentLayout::new(shared, lens, summary).unwrap();
            let m = build_path_mask(&l);
            let summary_start = l.summary_start();
            for i in 0..l.total() {
                // self-visibility and strict causality
                prop_assert!(m.get(i, i));
                for j in i + 1..l.total() {
                    prop_assert!(!m.get(i, j));
                }
                let role_i = l.role_of(i).unwrap();
                for j in 0..i {
                    let role_j = l.role_of(j).unwrap();
                    match (role_i, role_j) {
                        // cross-path pairs are never visible
                        (TokenRole::Path(a), TokenRole::Path(b)) if a != b => {
                            prop_assert!(!m.get(i, j));
                        }
                        _ => {}
                    }
                    // summary rows see every earlier token
                    if i >= summary_start {
                        prop_assert!(m.get(i, j));
                    }
                }
                // monotonicity within a path: a later token of the same path
                // sees at least what an earlier one does
                if let TokenRole::Path(k) = role_i {
                    let start = l.path_start(k).unwrap();
                    let end = start + l.path_len(k).unwrap();
                    for i2 in i + 1..end {
                        for j in 0..=i {
                            if m.get(i, j) {
                                prop_assert!(m.get(i2, j));
                            }
                        }
                    }
                }
            }
        }
    }
}
