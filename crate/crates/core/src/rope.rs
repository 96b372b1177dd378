//! Rotary position mathematics and the shared-start position plan with
//! learnable path embeddings.
//!
//! Keys receive the path embedding before rotation, values receive it
//! additively; queries are rotated with their own position and carry no
//! embedding. Shared-context and summary tokens carry no path embedding.
//! With the shared-start plan every path begins at the same position id, so
//! path identity is carried by the embeddings rather than by the ids.
//!
//! All math here runs in `f64`; the model rounds rotated keys and values to
//! the active precision after calling in.

use serde::{Deserialize, Serialize};

use crate::layout::SegmentLayout;
use crate::{Error, Result};

/// Rotation frequencies for one head dimension.
#[derive(Debug, Clone)]
pub struct RotaryParams {
    head_dim: usize,
    base: f64,
    freqs: Vec<f64>,
}

impl RotaryParams {
    /// `freqs[i] = base^(-2i/d)` for `i = 0 .. d/2 - 1`.
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "head_dim must be even and positive, got {head_dim}"
            )));
        }
        if !(base > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "rotary base must be positive, got {base}"
            )));
        }
        let half = head_dim / 2;
        let freqs = (0..half)
            .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
            .collect();
        Ok(Self {
            head_dim,
            base,
            freqs,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }
}

/// Per-token position ids and path membership for a flattened sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionPlan {
    pos: Vec<usize>,
    path_of: Vec<Option<usize>>,
}

impl PositionPlan {
    /// Plain consecutive ids for an untagged prefix (the shared prompt).
    pub fn consecutive(len: usize) -> Self {
        Self {
            pos: (0..len).collect(),
            path_of: vec![None; len],
        }
    }

    pub fn len(&self) -> usize {
        self.pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos.is_empty()
    }

    pub fn pos(&self, index: usize) -> usize {
        self.pos[index]
    }

    pub fn path_of(&self, index: usize) -> Option<usize> {
        self.path_of[index]
    }

    pub fn positions(&self) -> &[usize] {
        &self.pos
    }

    pub fn paths(&self) -> &[Option<usize>] {
        &self.path_of
    }
}

/// Shared-start position assignment: every path begins at `shared_len` and
/// increments independently; the summary starts one past the longest path's
/// end id.
pub fn assign_positions(layout: &SegmentLayout) -> PositionPlan {
    let total = layout.total();
    let mut pos = Vec::with_capacity(total);
    let mut path_of = Vec::with_capacity(total);

    for p in 0..layout.shared_len() {
        pos.push(p);
        path_of.push(None);
    }
    let path_start = layout.shared_len();
    for (i, &len) in layout.path_lens().iter().enumerate() {
        for offset in 0..len {
            pos.push(path_start + offset);
            path_of.push(Some(i + 1));
        }
    }
    let max_len = layout.path_lens().iter().copied().max().unwrap_or(0);
    let summary_start = path_start + max_len;
    for offset in 0..layout.summary_len() {
        pos.push(summary_start + offset);
        path_of.push(None);
    }
    PositionPlan { pos, path_of }
}

/// Disjoint-range baseline: each path occupies its own consecutive id
/// range in path order, the summary follows the last path. Position ids
/// coincide with flattened indices.
pub fn assign_positions_disjoint(layout: &SegmentLayout) -> PositionPlan {
    let total = layout.total();
    let mut pos = Vec::with_capacity(total);
    let mut path_of = Vec::with_capacity(total);
    let mut next = 0usize;
    for _ in 0..layout.shared_len() {
        pos.push(next);
        path_of.push(None);
        next += 1;
    }
    for (i, &len) in layout.path_lens().iter().enumerate() {
        for _ in 0..len {
            pos.push(next);
            path_of.push(Some(i + 1));
            next += 1;
        }
    }
    for _ in 0..layout.summary_len() {
        pos.push(next);
        path_of.push(None);
        next += 1;
    }
    PositionPlan { pos, path_of }
}

/// One learnable vector per path, length `head_dim`, broadcast across heads
/// and layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEmbeddingTable {
    embeddings: Vec<Vec<f64>>,
    trainable: bool,
}

impl PathEmbeddingTable {
    pub fn zeros(n_paths: usize, head_dim: usize) -> Self {
        Self {
            embeddings: vec![vec![0.0; head_dim]; n_paths],
            trainable: true,
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(first) = rows.first() {
            let d = first.len();
            if rows.iter().any(|r| r.len() != d) {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: rows.iter().map(|r| r.len()).find(|&l| l != d).unwrap(),
                });
            }
        }
        Ok(Self {
            embeddings: rows,
            trainable: true,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.embeddings.len()
    }

    pub fn head_dim(&self) -> usize {
        self.embeddings.first().map_or(0, Vec::len)
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Embedding for path `k` (1-based).
    pub fn get(&self, k: usize) -> Result<&[f64]> {
        if k == 0 || k > self.embeddings.len() {
            return Err(Error::UnknownPath {
                path: k,
                n_paths: self.embeddings.len(),
            });
        }
        Ok(&self.embeddings[k - 1])
    }

    pub fn get_mut(&mut self, k: usize) -> Result<&mut [f64]> {
        if k == 0 || k > self.embeddings.len() {
            return Err(Error::UnknownPath {
                path: k,
                n_paths: self.embeddings.len(),
            });
        }
        Ok(&mut self.embeddings[k - 1])
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn is_all_zero(&self) -> bool {
        self.embeddings.iter().all(|r| r.iter().all(|&x| x == 0.0))
    }
}

fn check_dim(v: &[f64], params: &RotaryParams) -> Result<()> {
    if v.len() != params.head_dim {
        return Err(Error::DimensionMismatch {
            expected: params.head_dim,
            got: v.len(),
        });
    }
    Ok(())
}

/// Rotate coordinate pair `(2i, 2i+1)` by angle `m * freqs[i]`. Signed `m`
/// covers relative offsets; norm is preserved.
pub fn rotate(v: &[f64], m: i64, params: &RotaryParams) -> Result<Vec<f64>> {
    check_dim(v, params)?;
    let mut out = vec![0.0; v.len()];
    for (i, &freq) in params.freqs.iter().enumerate() {
        let angle = m as f64 * freq;
        let (sin, cos) = angle.sin_cos();
        let a = v[2 * i];
        let b = v[2 * i + 1];
        out[2 * i] = a * cos - b * sin;
        out[2 * i + 1] = a * sin + b * cos;
    }
    Ok(out)
}

/// Rotary attention score: `dot(rotate(q, m_q), rotate(k, m_k))`. Depends
/// on the positions only through `m_k - m_q`.
pub fn score(q: &[f64], k: &[f64], m_q: i64, m_k: i64, params: &RotaryParams) -> Result<f64> {
    check_dim(q, params)?;
    let rq = rotate(q, m_q, params)?;
    let rk = rotate(k, m_k, params)?;
    Ok(dot(&rq, &rk))
}

/// Key transform: add the path embedding (when the token belongs to a
/// path), then rotate.
pub fn path_key(
    k: &[f64],
    m: i64,
    path: Option<usize>,
    table: &PathEmbeddingTable,
    params: &RotaryParams,
) -> Result<Vec<f64>> {
    check_dim(k, params)?;
    match path {
        None => rotate(k, m, params),
        Some(p) => {
            let e = table.get(p)?;
            let shifted: Vec<f64> = k.iter().zip(e).map(|(a, b)| a + b).collect();
            rotate(&shifted, m, params)
        }
    }
}

/// Value transform: add the path embedding when the token belongs to a path.
pub fn path_value(v: &[f64], path: Option<usize>, table: &PathEmbeddingTable) -> Result<Vec<f64>> {
    match path {
        None => Ok(v.to_vec()),
        Some(p) => {
            let e = table.get(p)?;
            if v.len() != e.len() {
                return Err(Error::DimensionMismatch {
                    expected: e.len(),
                    got: v.len(),
                });
            }
            Ok(v.iter().zip(e).map(|(a, b)| a + b).collect())
        }
    }
}

/// Split the path-aware score into its standard rotary term and the
/// embedding term: `(q^T R_{m_k - m_q} k, q^T R_{m_k - m_q} e)`. The two
/// terms sum to `dot(rotate(q, m_q), path_key(k, m_k, e))`.
pub fn score_decomposition(
    q: &[f64],
    k: &[f64],
    e: &[f64],
    m_q: i64,
    m_k: i64,
    params: &RotaryParams,
) -> Result<(f64, f64)> {
    check_dim(q, params)?;
    check_dim(k, params)?;
    check_dim(e, params)?;
    let rel = m_k - m_q;
    let standard = dot(q, &rotate(k, rel, params)?);
    let path_term = dot(q, &rotate(e, rel, params)?);
    Ok((standard, path_term))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::SegmentLayout;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn params(d: usize) -> RotaryParams {
        RotaryParams::new(d, 10000.0).unwrap()
    }

    fn random_vec(rng: &mut SplitMix64, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.next_f64() * 2.0 - 1.0).collect()
    }

    #[test]
    fn params_validation() {
        assert!(RotaryParams::new(3, 10000.0).is_err());
        assert!(RotaryParams::new(0, 10000.0).is_err());
        assert!(RotaryParams::new(4, -1.0).is_err());
        let p = params(8);
        assert_eq!(p.freqs()[0], 1.0);
        assert!(p.freqs().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn rotate_at_zero_is_identity() {
        let p = params(6);
        let v = vec![1.0, -2.0, 3.0, 0.5, -0.25, 4.0];
        assert_eq!(rotate(&v, 0, &p).unwrap(), v);
    }

    #[test]
    fn rotate_single_pair() {
        let p = RotaryParams::new(2, 10000.0).unwrap(); // freq[0] = 1
        let out = rotate(&[1.0, 0.0], 1, &p).unwrap();
        assert!((out[0] - 1f64.cos()).abs() < 1e-15);
        assert!((out[1] - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn rotate_preserves_norm() {
        let p = params(16);
        let mut rng = SplitMix64::new(11);
        for _ in 0..100 {
            let v = random_vec(&mut rng, 16);
            let m = rng.next_below(2000) as i64 - 1000;
            let r = rotate(&v, m, &p).unwrap();
            let n0: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let n1: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n0 - n1).abs() < 1e-12);
        }
    }

    #[test]
    fn score_equal_positions_is_plain_dot() {
        let p = params(8);
        let mut rng = SplitMix64::new(3);
        let q = random_vec(&mut rng, 8);
        let k = random_vec(&mut rng, 8);
        let s = score(&q, &k, 17, 17, &p).unwrap();
        assert!((s - dot(&q, &k)).abs() < 1e-12);
    }

    #[test]
    fn score_shift_invariance() {
        let p = params(8);
        let mut rng = SplitMix64::new(4);
        for _ in 0..200 {
            let q = random_vec(&mut rng, 8);
            let k = random_vec(&mut rng, 8);
            let m = rng.next_below(100) as i64;
            let n = rng.next_below(100) as i64;
            let c = rng.next_below(50) as i64;
            let a = score(&q, &k, m, n, &p).unwrap();
            let b = score(&q, &k, m + c, n + c, &p).unwrap();
            assert!((a - b).abs() < 1e-10, "shift invariance violated: {a} vs {b}");
        }
    }

    #[test]
    fn score_basis_vector_cosine() {
        let p = RotaryParams::new(2, 10000.0).unwrap();
        let e0 = [1.0, 0.0];
        let s = score(&e0, &e0, 0, 1, &p).unwrap();
        assert!((s - 1f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn path_key_reduces_to_rotation() {
        let p = params(8);
        let table = PathEmbeddingTable::zeros(2, 8);
        let mut rng = SplitMix64::new(5);
        let k = random_vec(&mut rng, 8);
        assert_eq!(
            path_key(&k, 9, Some(1), &table, &p).unwrap(),
            rotate(&k, 9, &p).unwrap()
        );
        assert_eq!(
            path_key(&k, 9, None, &table, &p).unwrap(),
            rotate(&k, 9, &p).unwrap()
        );
        assert!(path_key(&k, 9, Some(3), &table, &p).is_err());
    }

    #[test]
    fn path_key_is_linear_in_the_shift() {
        let p = params(8);
        let mut rng = SplitMix64::new(6);
        let k = random_vec(&mut rng, 8);
        let e = random_vec(&mut rng, 8);
        let table = PathEmbeddingTable::from_rows(vec![e.clone()]).unwrap();
        let lhs = path_key(&k, 23, Some(1), &table, &p).unwrap();
        let rk = rotate(&k, 23, &p).unwrap();
        let re = rotate(&e, 23, &p).unwrap();
        for i in 0..8 {
            assert!((lhs[i] - (rk[i] + re[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn path_value_cases() {
        let table = PathEmbeddingTable::from_rows(vec![vec![0.5, -1.0]]).unwrap();
        let zero_table = PathEmbeddingTable::zeros(1, 2);
        let v = vec![2.0, 3.0];
        assert_eq!(path_value(&v, Some(1), &zero_table).unwrap(), v);
        assert_eq!(path_value(&v, None, &table).unwrap(), v);
        assert_eq!(path_value(&v, Some(1), &table).unwrap(), vec![2.5, 2.0]);
        let neg = vec![-0.5, 1.0];
        assert_eq!(path_value(&neg, Some(1), &table).unwrap(), vec![0.0, 0.0]);
        assert!(path_value(&v, Some(2), &table).is_err());
    }

    #[test]
    fn decomposition_zero_embedding_has_zero_path_term() {
        let p = params(8);
        let mut rng = SplitMix64::new(7);
        let q = random_vec(&mut rng, 8);
        let k = random_vec(&mut rng, 8);
        let zero = vec![0.0; 8];
        let (_, path_term) = score_decomposition(&q, &k, &zero, 3, 11, &p).unwrap();
        assert_eq!(path_term, 0.0);
    }

    #[test]
    fn decomposition_matches_full_score() {
        let p = params(16);
        let mut rng = SplitMix64::new(8);
        for _ in 0..200 {
            let q = random_vec(&mut rng, 16);
            let k = random_vec(&mut rng, 16);
            let e = random_vec(&mut rng, 16);
            let m_q = rng.next_below(64) as i64;
            let m_k = rng.next_below(64) as i64;
            let (std_term, path_term) = score_decomposition(&q, &k, &e, m_q, m_k, &p).unwrap();
            let table = PathEmbeddingTable::from_rows(vec![e]).unwrap();
            let full = dot(
                &rotate(&q, m_q, &p).unwrap(),
                &path_key(&k, m_k, Some(1), &table, &p).unwrap(),
            );
            assert!((std_term + path_term - full).abs() < 1e-10);
        }
    }

    #[test]
    fn decomposition_orthogonal_query_sums_to_zero() {
        let p = params(8);
        let mut rng = SplitMix64::new(9);
        let k = random_vec(&mut rng, 8);
        let e = random_vec(&mut rng, 8);
        let m_q = 4i64;
        let m_k = 19i64;
        // Gram-Schmidt: remove the component of q along rotate(k + e, rel)
        let shifted: Vec<f64> = k.iter().zip(&e).map(|(a, b)| a + b).collect();
        let w = rotate(&shifted, m_k - m_q, &p).unwrap();
        let q0 = random_vec(&mut rng, 8);
        let coeff = dot(&q0, &w) / dot(&w, &w);
        let q: Vec<f64> = q0.iter().zip(&w).map(|(a, b)| a - coeff * b).collect();
        let (std_term, path_term) = score_decomposition(&q, &k, &e, m_q, m_k, &p).unwrap();
        assert!((std_term + path_term).abs() < 1e-10);
    }

    #[test]
    fn swapping_equal_length_paths_permutes_scores() {
        // With equal embeddings, swapping the contents of two equal-length
        // paths swaps the summary-token scores; with distinct embeddings the
        // standard terms still swap and only the path terms differ.
        let p = params(8);
        let mut rng = SplitMix64::new(10);
        let q = random_vec(&mut rng, 8);
        let ka: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut rng, 8)).collect();
        let kb: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut rng, 8)).collect();
        let shared_len = 4i64;
        let m_summary = shared_len + 3;

        let score_path = |keys: &[Vec<f64>], e: &[f64]| -> Vec<(f64, f64)> {
            keys.iter()
                .enumerate()
                .map(|(o, k)| {
                    score_decomposition(&q, k, e, m_summary, shared_len + o as i64, &p).unwrap()
                })
                .collect()
        };

        let e_common = random_vec(&mut rng, 8);
        let before_a = score_path(&ka, &e_common);
        let before_b = score_path(&kb, &e_common);
        // swap contents
        let after_a = score_path(&kb, &e_common);
        let after_b = score_path(&ka, &e_common);
        for o in 0..3 {
            let tot = |t: &(f64, f64)| t.0 + t.1;
            assert_eq!(tot(&before_a[o]), tot(&after_b[o]));
            assert_eq!(tot(&before_b[o]), tot(&after_a[o]));
        }

        // distinct embeddings: standard terms swap, path terms follow the path
        let e1 = random_vec(&mut rng, 8);
        let e2 = random_vec(&mut rng, 8);
        let a1 = score_path(&ka, &e1);
        let b2 = score_path(&kb, &e2);
        let a1_swapped = score_path(&kb, &e1);
        let b2_swapped = score_path(&ka, &e2);
        for o in 0..3 {
            assert_eq!(a1[o].0, b2_swapped[o].0);
            assert_eq!(b2[o].0, a1_swapped[o].0);
            // path term depends only on the embedding and relative offset
            assert_eq!(a1[o].1, a1_swapped[o].1);
            assert_eq!(b2[o].1, b2_swapped[o].1);
        }
    }

    #[test]
    fn position_plan_examples() {
        let l = SegmentLayout::new(5, vec![3, 5], 2).unwrap();
        let plan = assign_positions(&l);
        assert_eq!(plan.pos(l.path_start(1).unwrap()), 5);
        assert_eq!(plan.pos(l.path_start(2).unwrap()), 5);
        assert_eq!(plan.pos(l.path_start(1).unwrap() + 2), 7); // end of path 1
        assert_eq!(plan.pos(l.path_start(2).unwrap() + 4), 9); // end of path 2
        assert_eq!(plan.pos(l.summary_start()), 10);

        // single path degenerates to consecutive ids
        let l1 = SegmentLayout::new(4, vec![3], 2).unwrap();
        let p1 = assign_positions(&l1);
        assert_eq!(p1.positions(), (0..9).collect::<Vec<_>>().as_slice());
        assert_eq!(assign_positions_disjoint(&l1), p1);

        // empty prompt corner: all first path tokens share id 0
        let l0 = SegmentLayout::new(0, vec![1, 1, 1, 1], 2).unwrap();
        let p0 = assign_positions(&l0);
        assert_eq!(&p0.positions()[..4], &[0, 0, 0, 0]);
        assert_eq!(p0.pos(l0.summary_start()), 1);
    }

    #[test]
    fn disjoint_plan_examples() {
        let l = SegmentLayout::new(2, vec![2, 2], 1).unwrap();
        let plan = assign_positions_disjoint(&l);
        assert_eq!(plan.positions(), &[0, 1, 2, 3, 4, 5, 6]);

        let l2 = SegmentLayout::new(5, vec![3, 5], 1).unwrap();
        let p2 = assign_positions_disjoint(&l2);
        assert_eq!(p2.pos(l2.summary_start()), 13);
    }

    proptest! {
        #[test]
        fn rotation_relative_identity(seed in any::<u64>()) {
            let p = params(16);
            let mut rng = SplitMix64::new(seed);
            let q = random_vec(&mut rng, 16);
            let k = random_vec(&mut rng, 16);
            let a = rng.next_below(512) as i64;
            let b = rng.next_below(512) as i64;
            let lhs = dot(&rotate(&q, a, &p).unwrap(), &rotate(&k, b, &p).unwrap());
            let rhs = dot(&q, &rotate(&k, b - a, &p).unwrap());
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }

        #[test]
        fn plan_invariants(
            shared in 0usize..8,
            lens in prop::collection::vec(1usize..8, 1..5),
            summary in 0usize..6,
        ) {
            let l = SegmentLayout::new(shared, lens.clone(), summary).unwrap();
            let plan = assign_positions(&l);
            prop_assert_eq!(plan.len(), l.total());
            // shared ids count up from zero
            for i in 0..shared {
                prop_assert_eq!(plan.pos(i), i);
                prop_assert_eq!(plan.path_of(i), None);
            }
            // equal starts, unit increments, uniform ids at equal offsets
            for k in 1..=l.n_paths() {
                let start = l.path_start(k).unwrap();
                prop_assert_eq!(plan.pos(start), shared);
                for o in 0..l.path_len(k).unwrap() {
                    prop_assert_eq!(plan.pos(start + o), shared + o);
                    prop_assert_eq!(plan.path_of(start + o), Some(k));
                }
            }
            // summary starts one past the longest path end
            let max_len = lens.iter().copied().max().unwrap();
            for o in 0..summary {
                prop_assert_eq!(plan.pos(l.summary_start() + o), shared + max_len + o);
                prop_assert_eq!(plan.path_of(l.summary_start() + o), None);
            }
            // the disjoint comparator agrees exactly when there is one path
            if l.n_paths() == 1 {
                prop_assert_eq!(assign_positions_disjoint(&l), plan);
            }
        }
    }
}
