//! Monolithic and incremental forward passes.
//!
//! Both passes share the same scalar helpers and iterate visible keys in
//! flattened order, so a stepwise replay reproduces the monolithic logits
//! bit-for-bit at a given precision. In fp32 mode every elementary result is
//! rounded through `f32` (see [`crate::precision::Precision`]); rotations are
//! computed in 64-bit and truncated afterwards.

use crate::kvcache::{BlockStore, SequenceHandle};
use crate::layout::TokenId;
use crate::mask::PathMask;
use crate::matrix::Matrix;
use crate::precision::Precision;
use crate::rope::{self, PositionPlan};
use crate::{Error, Result};

use super::ToyDecoder;

pub(crate) const RMS_EPS: f64 = 1e-6;

#[inline]
pub(crate) fn dot_p(a: &[f64], b: &[f64], p: Precision) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc = p.round(acc + p.round(a[i] * b[i]));
    }
    acc
}

pub(crate) fn matvec(w: &Matrix, x: &[f64], p: Precision) -> Vec<f64> {
    (0..w.rows()).map(|r| dot_p(w.row(r), x, p)).collect()
}

/// RMS normalization; returns the normalized row and the denominator needed
/// by the backward pass.
pub(crate) fn rmsnorm(x: &[f64], gain: &[f64], p: Precision) -> (Vec<f64>, f64) {
    let mut ss = 0.0;
    for &v in x {
        ss = p.round(ss + p.round(v * v));
    }
    let mean = p.round(ss / x.len() as f64);
    let denom = p.round(p.round(mean + RMS_EPS).sqrt());
    let out = x
        .iter()
        .zip(gain)
        .map(|(&v, &g)| p.round(p.round(v / denom) * g))
        .collect();
    (out, denom)
}

#[inline]
pub(crate) fn silu(x: f64, p: Precision) -> f64 {
    let e = p.round((-x).exp());
    let sig = p.round(1.0 / p.round(1.0 + e));
    p.round(x * sig)
}

#[inline]
fn add_assign_rounded(x: &mut [f64], delta: &[f64], p: Precision) {
    for (a, b) in x.iter_mut().zip(delta) {
        *a = p.round(*a + *b);
    }
}

/// Softmax attention for one query head over an ordered visible set.
/// Scores, the exponential weights and the value accumulation all reduce
/// left-to-right.
fn attend_head(
    q_head: &[f64],
    keys: &[&[f64]],
    values: &[&[f64]],
    inv_scale: f64,
    p: Precision,
    mut probs_out: Option<&mut Vec<f64>>,
) -> Vec<f64> {
    debug_assert!(!keys.is_empty(), "a token always sees itself");
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| p.round(dot_p(q_head, k, p) * inv_scale))
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights = Vec::with_capacity(scores.len());
    let mut sum = 0.0;
    for &s in &scores {
        let w = p.round(p.round(s - max).exp());
        weights.push(w);
        sum = p.round(sum + w);
    }
    for w in weights.iter_mut() {
        *w = p.round(*w / sum);
    }
    let hd = q_head.len();
    let mut out = vec![0.0; hd];
    for (dd, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, v) in values.iter().enumerate() {
            acc = p.round(acc + p.round(weights[j] * v[dd]));
        }
        *o = acc;
    }
    if let Some(slot) = probs_out.as_deref_mut() {
        *slot = weights;
    }
    out
}

/// Rotate one query head slice and round to the active precision.
fn rotate_query(
    model: &ToyDecoder,
    q_head: &[f64],
    pos: usize,
    p: Precision,
) -> Result<Vec<f64>> {
    let mut r = rope::rotate(q_head, pos as i64, &model.rotary)?;
    for x in r.iter_mut() {
        *x = p.round(*x);
    }
    Ok(r)
}

/// Path-aware key/value transform for one head slice, rounded to the active
/// precision. The cached form: keys post-embedding post-rotation, values
/// post-embedding.
fn transform_kv(
    model: &ToyDecoder,
    k_head: &[f64],
    v_head: &[f64],
    pos: usize,
    path: Option<usize>,
    p: Precision,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut k = rope::path_key(k_head, pos as i64, path, &model.path_embed, &model.rotary)?;
    for x in k.iter_mut() {
        *x = p.round(*x);
    }
    let mut v = rope::path_value(v_head, path, &model.path_embed)?;
    for x in v.iter_mut() {
        *x = p.round(*x);
    }
    Ok((k, v))
}

/// Intermediates captured for the backward pass.
#[derive(Default)]
pub(crate) struct ForwardTrace {
    pub(crate) x_inputs: Vec<Matrix>,
    pub(crate) attn_denoms: Vec<Vec<f64>>,
    pub(crate) q_rot: Vec<Matrix>,
    pub(crate) k_rot: Vec<Matrix>,
    pub(crate) v_emb: Vec<Matrix>,
    /// `[layer][token][head][visible-rank]` softmax weights.
    pub(crate) probs: Vec<Vec<Vec<Vec<f64>>>>,
    pub(crate) x_mid: Vec<Matrix>,
    pub(crate) mlp_denoms: Vec<Vec<f64>>,
    pub(crate) u_pre: Vec<Matrix>,
    pub(crate) x_final: Matrix,
    pub(crate) final_denoms: Vec<f64>,
    pub(crate) inv_scale: f64,
}

fn check_inputs(
    model: &ToyDecoder,
    tokens: &[TokenId],
    mask: &PathMask,
    plan: &PositionPlan,
) -> Result<()> {
    if mask.n() != tokens.len() {
        return Err(Error::DimensionMismatch {
            expected: tokens.len(),
            got: mask.n(),
        });
    }
    if plan.len() != tokens.len() {
        return Err(Error::DimensionMismatch {
            expected: tokens.len(),
            got: plan.len(),
        });
    }
    for &t in tokens {
        if t as usize >= model.config.vocab_size {
            return Err(Error::TokenOutOfVocab {
                token: t,
                vocab_size: model.config.vocab_size,
            });
        }
    }
    Ok(())
}

fn forward_full_impl(
    model: &ToyDecoder,
    tokens: &[TokenId],
    mask: &PathMask,
    plan: &PositionPlan,
    use_path_embeddings: bool,
    want_trace: bool,
) -> Result<(Matrix, Option<ForwardTrace>)> {
    check_inputs(model, tokens, mask, plan)?;
    let cfg = &model.config;
    let p = cfg.precision;
    let total = tokens.len();
    let d = cfg.model_dim();
    let hd = cfg.head_dim;
    let nh = cfg.n_heads;
    let inv_scale = p.round(1.0 / (hd as f64).sqrt());

    let mut x = Matrix::zeros(total, d);
    for t in 0..total {
        x.row_mut(t).copy_from_slice(model.embed.row(tokens[t] as usize));
    }

    let mut trace = want_trace.then(|| ForwardTrace {
        inv_scale,
        ..ForwardTrace::default()
    });

    for layer in &model.layers {
        if let Some(tr) = trace.as_mut() {
            tr.x_inputs.push(x.clone());
        }
        let mut q_rot = Matrix::zeros(total, d);
        let mut k_rot = Matrix::zeros(total, d);
        let mut v_emb = Matrix::zeros(total, d);
        let mut denoms = vec![0.0; total];
        for t in 0..total {
            let (h, denom) = rmsnorm(x.row(t), &layer.attn_norm, p);
            denoms[t] = denom;
            let q = matvec(&layer.wq, &h, p);
            let k = matvec(&layer.wk, &h, p);
            let v = matvec(&layer.wv, &h, p);
            let pos = plan.pos(t);
            let path = if use_path_embeddings {
                plan.path_of(t)
            } else {
                None
            };
            for head in 0..nh {
                let lo = head * hd;
                let hi = lo + hd;
                let qh = rotate_query(model, &q[lo..hi], pos, p)?;
                q_rot.row_mut(t)[lo..hi].copy_from_slice(&qh);
                let (kh, vh) = transform_kv(model, &k[lo..hi], &v[lo..hi], pos, path, p)?;
                k_rot.row_mut(t)[lo..hi].copy_from_slice(&kh);
                v_emb.row_mut(t)[lo..hi].copy_from_slice(&vh);
            }
        }

        let mut attn_cat = Matrix::zeros(total, d);
        let mut layer_probs: Vec<Vec<Vec<f64>>> = Vec::new();
        for t in 0..total {
            let visible: Vec<usize> = (0..=t).filter(|&j| mask.get(t, j)).collect();
            let mut head_probs: Vec<Vec<f64>> = Vec::new();
            for head in 0..nh {
                let lo = head * hd;
                let hi = lo + hd;
                let keys: Vec<&[f64]> = visible.iter().map(|&j| &k_rot.row(j)[lo..hi]).collect();
                let values: Vec<&[f64]> = visible.iter().map(|&j| &v_emb.row(j)[lo..hi]).collect();
                let mut probs = Vec::new();
                let out = attend_head(
                    &q_rot.row(t)[lo..hi],
                    &keys,
                    &values,
                    inv_scale,
                    p,
                    trace.is_some().then_some(&mut probs),
                );
                attn_cat.row_mut(t)[lo..hi].copy_from_slice(&out);
                if trace.is_some() {
                    head_probs.push(probs);
                }
            }
            if trace.is_some() {
                layer_probs.push(head_probs);
            }
        }
        for t in 0..total {
            let proj = matvec(&layer.wo, attn_cat.row(t), p);
            add_assign_rounded(x.row_mut(t), &proj, p);
        }
        if let Some(tr) = trace.as_mut() {
            tr.attn_denoms.push(denoms);
            tr.q_rot.push(q_rot);
            tr.k_rot.push(k_rot);
            tr.v_emb.push(v_emb);
            tr.probs.push(layer_probs);
            tr.x_mid.push(x.clone());
        }

        let mut mlp_denoms = vec![0.0; total];
        let mut u_rows = want_trace.then(|| Matrix::zeros(total, cfg.ff_dim()));
        for t in 0..total {
            let (h2, denom) = rmsnorm(x.row(t), &layer.mlp_norm, p);
            mlp_denoms[t] = denom;
            let u = matvec(&layer.w_up, &h2, p);
            if let Some(rows) = u_rows.as_mut() {
                rows.row_mut(t).copy_from_slice(&u);
            }
            let a: Vec<f64> = u.iter().map(|&z| silu(z, p)).collect();
            let m = matvec(&layer.w_down, &a, p);
            add_assign_rounded(x.row_mut(t), &m, p);
        }
        if let Some(tr) = trace.as_mut() {
            tr.mlp_denoms.push(mlp_denoms);
            tr.u_pre.push(u_rows.expect("trace requested"));
        }
    }

    let mut logits = Matrix::zeros(total, cfg.vocab_size);
    let mut final_denoms = vec![0.0; total];
    if let Some(tr) = trace.as_mut() {
        tr.x_final = x.clone();
    }
    for t in 0..total {
        let (h, denom) = rmsnorm(x.row(t), &model.final_norm, p);
        final_denoms[t] = denom;
        logits.row_mut(t).copy_from_slice(&matvec(&model.unembed, &h, p));
    }
    if let Some(tr) = trace.as_mut() {
        tr.final_denoms = final_denoms;
    }
    Ok((logits, trace))
}

/// Masked monolithic forward pass: the oracle every incremental decode is
/// checked against. Attention is restricted to mask-visible pairs and keys
/// and values pass through the path-aware transform.
pub fn forward_full(
    model: &ToyDecoder,
    tokens: &[TokenId],
    mask: &PathMask,
    plan: &PositionPlan,
) -> Result<Matrix> {
    forward_full_impl(model, tokens, mask, plan, true, false).map(|(l, _)| l)
}

/// Baseline forward without path embeddings (plain rotary keys/values).
pub fn forward_full_plain(
    model: &ToyDecoder,
    tokens: &[TokenId],
    mask: &PathMask,
    plan: &PositionPlan,
) -> Result<Matrix> {
    forward_full_impl(model, tokens, mask, plan, false, false).map(|(l, _)| l)
}

pub(crate) fn forward_full_traced(
    model: &ToyDecoder,
    tokens: &[TokenId],
    mask: &PathMask,
    plan: &PositionPlan,
) -> Result<(Matrix, ForwardTrace)> {
    forward_full_impl(model, tokens, mask, plan, true, true)
        .map(|(l, t)| (l, t.expect("trace requested")))
}

/// Per-layer post-transform keys and values from the monolithic pass
/// (exactly what the cache stores), for oracle comparisons of cached bytes.
pub fn forward_kv(
    model: &ToyDecoder,
    tokens: &[TokenId],
    mask: &PathMask,
    plan: &PositionPlan,
) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let (_, trace) = forward_full_traced(model, tokens, mask, plan)?;
    Ok((trace.k_rot, trace.v_emb))
}

/// Advance one cached sequence by one token and return the next-token
/// logits. The token's post-transform keys and values are appended to the
/// handle's sequence, so the cache holds exactly what later tokens may read.
pub fn forward_step(
    model: &ToyDecoder,
    store: &mut BlockStore,
    handle: &mut SequenceHandle,
    token: TokenId,
    pos: usize,
    path: Option<usize>,
) -> Result<Vec<f64>> {
    let cfg = &model.config;
    if token as usize >= cfg.vocab_size {
        return Err(Error::TokenOutOfVocab {
            token,
            vocab_size: cfg.vocab_size,
        });
    }
    handle.check_advance(pos)?;
    let p = cfg.precision;
    let d = cfg.model_dim();
    let hd = cfg.head_dim;
    let nh = cfg.n_heads;
    let inv_scale = p.round(1.0 / (hd as f64).sqrt());
    let spans = handle.visible_spans(store.block_size());

    let mut x = model.embed.row(token as usize).to_vec();
    let mut new_k: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_layers);
    let mut new_v: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_layers);

    for (li, layer) in model.layers.iter().enumerate() {
        let (h, _) = rmsnorm(&x, &layer.attn_norm, p);
        let q = matvec(&layer.wq, &h, p);
        let k = matvec(&layer.wk, &h, p);
        let v = matvec(&layer.wv, &h, p);
        let mut k_full = vec![0.0; d];
        let mut v_full = vec![0.0; d];
        let mut attn_cat = vec![0.0; d];
        for head in 0..nh {
            let lo = head * hd;
            let hi = lo + hd;
            let qh = rotate_query(model, &q[lo..hi], pos, p)?;
            let (kh, vh) = transform_kv(model, &k[lo..hi], &v[lo..hi], pos, path, p)?;
            let mut keys: Vec<&[f64]> = Vec::new();
            let mut values: Vec<&[f64]> = Vec::new();
            for span in &spans {
                for slot in span.start..span.end {
                    let (ks, vs) = store.kv_at(span.block, li, slot);
                    keys.push(&ks[lo..hi]);
                    values.push(&vs[lo..hi]);
                }
            }
            // the new token sees itself last, matching flattened order
            keys.push(&kh);
            values.push(&vh);
            let out = attend_head(&qh, &keys, &values, inv_scale, p, None);
            attn_cat[lo..hi].copy_from_slice(&out);
            k_full[lo..hi].copy_from_slice(&kh);
            v_full[lo..hi].copy_from_slice(&vh);
        }
        let proj = matvec(&layer.wo, &attn_cat, p);
        add_assign_rounded(&mut x, &proj, p);
        new_k.push(k_full);
        new_v.push(v_full);

        let (h2, _) = rmsnorm(&x, &layer.mlp_norm, p);
        let u = matvec(&layer.w_up, &h2, p);
        let a: Vec<f64> = u.iter().map(|&z| silu(z, p)).collect();
        let m = matvec(&layer.w_down, &a, p);
        add_assign_rounded(&mut x, &m, p);
    }

    let (h, _) = rmsnorm(&x, &model.final_norm, p);
    let logits = matvec(&model.unembed, &h, p);

    let seq_id = handle.seq().id();
    store.log_reads(seq_id, spans.iter().map(|s| s.block));
    store.append(handle.seq_mut(), &new_k, &new_v)?;
    Ok(logits)
}

/// Mean cross-entropy over unmasked next-token targets. `loss_mask[t]`
/// marks whether the token at position `t` contributes as a target; the
/// first position is never a target.
pub fn loss_masked(
    model: &ToyDecoder,
    tokens: &[TokenId],
    loss_mask: &[bool],
    mask: &PathMask,
    plan: &PositionPlan,
) -> Result<f64> {
    if loss_mask.len() != tokens.len() {
        return Err(Error::DimensionMismatch {
            expected: tokens.len(),
            got: loss_mask.len(),
        });
    }
    let logits = forward_full(model, tokens, mask, plan)?;
    let p = model.config.precision;
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 1..tokens.len() {
        if !loss_mask[t] {
            continue;
        }
        let row = logits.row(t - 1);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &s in row {
            sum = p.round(sum + p.round(p.round(s - max).exp()));
        }
        let lse = p.round(max + p.round(sum.ln()));
        total = p.round(total + p.round(lse - row[tokens[t] as usize]));
        count += 1;
    }
    if count == 0 {
        return Err(Error::AllTargetsMasked);
    }
    Ok(p.round(total / count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::SegmentLayout;
    use crate::mask::{build_causal_mask, build_path_mask};
    use crate::model::ModelConfig;
    use crate::rng::SplitMix64;
    use crate::rope::{assign_positions, assign_positions_disjoint, PathEmbeddingTable};

    fn small_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            head_dim: 8,
            vocab_size: 512,
            seed: 42,
            ..ModelConfig::desk_default()
        }
    }

    fn random_tokens(rng: &mut SplitMix64, n: usize) -> Vec<TokenId> {
        (0..n).map(|_| rng.next_below(256) as TokenId).collect()
    }

    #[test]
    fn single_path_equals_causal_baseline() {
        let model = ToyDecoder::init(&small_config()).unwrap();
        let layout = SegmentLayout::new(3, vec![4], 2).unwrap();
        let mut rng = SplitMix64::new(1);
        let tokens = random_tokens(&mut rng, layout.total());
        let pa = forward_full(
            &model,
            &tokens,
            &build_path_mask(&layout),
            &assign_positions(&layout),
        )
        .unwrap();
        // one path: the mask is causal and the shared-start ids are 0..n
        let causal = forward_full(
            &model,
            &tokens,
            &build_causal_mask(layout.total()),
            &assign_positions_disjoint(&layout),
        )
        .unwrap();
        assert_eq!(pa, causal);
    }

    #[test]
    fn zero_weight_model_gives_uniform_logits() {
        let model = ToyDecoder::zeroed(&small_config()).unwrap();
        let layout = SegmentLayout::new(2, vec![2, 2], 1).unwrap();
        let tokens = vec![1, 2, 3, 4, 5, 6, 7];
        let logits = forward_full(
            &model,
            &tokens,
            &build_path_mask(&layout),
            &assign_positions(&layout),
        )
        .unwrap();
        for t in 0..logits.rows() {
            let row = logits.row(t);
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }

    #[test]
    fn perturbing_one_path_leaves_others_bit_identical() {
        let model = ToyDecoder::init(&small_config()).unwrap();
        let layout = SegmentLayout::new(3, vec![3, 4], 2).unwrap();
        let mask = build_path_mask(&layout);
        let plan = assign_positions(&layout);
        let mut rng = SplitMix64::new(2);
        let tokens = random_tokens(&mut rng, layout.total());
        let mut altered = tokens.clone();
        let p2 = layout.path_start(2).unwrap();
        for o in 0..layout.path_len(2).unwrap() {
            altered[p2 + o] = rng.next_below(256) as TokenId;
        }
        let a = forward_full(&model, &tokens, &mask, &plan).unwrap();
        let b = forward_full(&model, &altered, &mask, &plan).unwrap();
        // shared context and path 1 rows are untouched
        for t in 0..p2 {
            assert_eq!(a.row(t), b.row(t), "row {t} changed");
        }
    }

    #[test]
    fn zero_table_matches_plain_forward() {
        let mut model = ToyDecoder::init(&small_config()).unwrap();
        let layout = SegmentLayout::new(2, vec![2, 3], 2).unwrap();
        let mask = build_path_mask(&layout);
        let plan = assign_positions(&layout);
        let mut rng = SplitMix64::new(3);
        let tokens = random_tokens(&mut rng, layout.total());
        let plain = forward_full_plain(&model, &tokens, &mask, &plan).unwrap();
        let with_zero_table = forward_full(&model, &tokens, &mask, &plan).unwrap();
        assert_eq!(plain, with_zero_table);

        // a non-zero table must change summary rows
        let mut rows = Vec::new();
        for k in 0..model.config.max_paths {
            rows.push((0..model.config.head_dim).map(|i| 0.05 * (k + i) as f64).collect());
        }
        model.set_path_embeddings(PathEmbeddingTable::from_rows(rows).unwrap()).unwrap();
        let with_table = forward_full(&model, &tokens, &mask, &plan).unwrap();
        assert_ne!(plain, with_table);
    }

    #[test]
    fn loss_masked_edge_cases() {
        let model = ToyDecoder::init(&small_config()).unwrap();
        let layout = SegmentLayout::new(2, vec![2], 1).unwrap();
        let mask = build_path_mask(&layout);
        let plan = assign_positions(&layout);
        let tokens = vec![1, 2, 3, 4, 5];
        assert!(matches!(
            loss_masked(&model, &tokens, &[false; 5], &mask, &plan),
            Err(Error::AllTargetsMasked)
        ));

        // single unmasked target: loss = -ln p(target)
        let mut lm = [false; 5];
        lm[3] = true;
        let loss = loss_masked(&model, &tokens, &lm, &mask, &plan).unwrap();
        let logits = forward_full(&model, &tokens, &mask, &plan).unwrap();
        let row = logits.row(2);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|s| (s - max).exp()).sum();
        let p_target = ((row[tokens[3] as usize] - max).exp()) / z;
        assert!((loss - (-p_target.ln())).abs() < 1e-12);

        // masking a target changes the loss but not the forward logits
        let mut lm2 = [true; 5];
        lm2[2] = false;
        let loss2 = loss_masked(&model, &tokens, &lm2, &mask, &plan).unwrap();
        assert_ne!(loss, loss2);
        let logits2 = forward_full(&model, &tokens, &mask, &plan).unwrap();
        assert_eq!(logits, logits2);
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let model = ToyDecoder::init(&small_config()).unwrap();
        let layout = SegmentLayout::new(1, vec![1], 1).unwrap();
        let mask = build_path_mask(&layout);
        let plan = assign_positions(&layout);
        assert!(forward_full(&model, &[1, 2], &mask, &plan).is_err());
        assert!(forward_full(&model, &[1, 2, 10_000], &mask, &plan).is_err());
    }
}
