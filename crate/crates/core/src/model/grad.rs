//! Reverse-mode gradient of the masked loss with respect to the path
//! embeddings.
//!
//! The embeddings enter every layer twice: pre-rotation on keys and
//! additively on values of path tokens. Gradients therefore flow back
//! through the whole stack; the backward pass here accumulates in `f64`
//! regardless of model precision, and the finite-difference agreement
//! contract is stated at fp64.

use crate::layout::TokenId;
use crate::mask::PathMask;
use crate::matrix::Matrix;
use crate::rope::{self, PositionPlan};
use crate::{Error, Result};

use super::forward::forward_full_traced;
use super::ToyDecoder;

/// `y[j] = sum_i w[i][j] * g[i]` (transpose multiply, plain f64).
fn matvec_t(w: &Matrix, g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for i in 0..w.rows() {
        let row = w.row(i);
        let gi = g[i];
        if gi == 0.0 {
            continue;
        }
        for j in 0..w.cols() {
            out[j] += row[j] * gi;
        }
    }
    out
}

/// Backward through `y_i = gain_i * x_i / denom` with
/// `denom = sqrt(mean(x^2) + eps)`.
fn rmsnorm_backward(dy: &[f64], x: &[f64], denom: f64, gain: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mut weighted = 0.0;
    for i in 0..x.len() {
        weighted += dy[i] * gain[i] * x[i];
    }
    let d3 = denom * denom * denom;
    (0..x.len())
        .map(|j| dy[j] * gain[j] / denom - x[j] * weighted / (n * d3))
        .collect()
}

#[inline]
fn silu_derivative(u: f64) -> f64 {
    let sig = 1.0 / (1.0 + (-u).exp());
    sig * (1.0 + u * (1.0 - sig))
}

/// Analytic gradient of [`super::loss_masked`] with respect to every path
/// embedding vector. Rows of the result align with the embedding table;
/// paths absent from the layout receive exactly zero.
pub fn grad_path_embeddings(
    model: &ToyDecoder,
    tokens: &[TokenId],
    loss_mask: &[bool],
    mask: &PathMask,
    plan: &PositionPlan,
) -> Result<Vec<Vec<f64>>> {
    grad_with_scale(model, tokens, loss_mask, mask, plan, 1.0)
}

pub(crate) fn grad_with_scale(
    model: &ToyDecoder,
    tokens: &[TokenId],
    loss_mask: &[bool],
    mask: &PathMask,
    plan: &PositionPlan,
    scale: f64,
) -> Result<Vec<Vec<f64>>> {
    if loss_mask.len() != tokens.len() {
        return Err(Error::DimensionMismatch {
            expected: tokens.len(),
            got: loss_mask.len(),
        });
    }
    let targets: Vec<(usize, TokenId)> = (1..tokens.len())
        .filter(|&t| loss_mask[t])
        .map(|t| (t - 1, tokens[t]))
        .collect();
    if targets.is_empty() {
        return Err(Error::AllTargetsMasked);
    }

    let (logits, trace) = forward_full_traced(model, tokens, mask, plan)?;
    let cfg = &model.config;
    let total = tokens.len();
    let d = cfg.model_dim();
    let hd = cfg.head_dim;
    let nh = cfg.n_heads;
    let inv_scale = trace.inv_scale;
    let n_targets = targets.len() as f64;

    // d loss / d logits: (softmax - onehot) * scale / N on predecessor rows
    let mut dlogits = Matrix::zeros(total, cfg.vocab_size);
    for &(row, target) in &targets {
        let r = logits.row(row);
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = r.iter().map(|s| (s - max).exp()).sum();
        let drow = dlogits.row_mut(row);
        for v in 0..r.len() {
            let p = (r[v] - max).exp() / z;
            let delta = if v == target as usize { 1.0 } else { 0.0 };
            drow[v] += (p - delta) * scale / n_targets;
        }
    }

    // unembed + final norm backward
    let mut dx = Matrix::zeros(total, d);
    for t in 0..total {
        if dlogits.row(t).iter().all(|&v| v == 0.0) {
            continue;
        }
        let dh = matvec_t(&model.unembed, dlogits.row(t));
        let back = rmsnorm_backward(
            &dh,
            trace.x_final.row(t),
            trace.final_denoms[t],
            &model.final_norm,
        );
        dx.row_mut(t).copy_from_slice(&back);
    }

    let mut de = vec![vec![0.0; hd]; model.path_embed.n_paths()];

    for (li, layer) in model.layers.iter().enumerate().rev() {
        // MLP backward: incoming dx sits at the layer output
        for t in 0..total {
            let dm = dx.row(t).to_vec();
            let da = matvec_t(&layer.w_down, &dm);
            let u = trace.u_pre[li].row(t);
            let du: Vec<f64> = da
                .iter()
                .zip(u)
                .map(|(&g, &z)| g * silu_derivative(z))
                .collect();
            let dh2 = matvec_t(&layer.w_up, &du);
            let back = rmsnorm_backward(
                &dh2,
                trace.x_mid[li].row(t),
                trace.mlp_denoms[li][t],
                &layer.mlp_norm,
            );
            for (a, b) in dx.row_mut(t).iter_mut().zip(&back) {
                *a += b;
            }
        }

        // attention backward: dx now sits at the post-attention residual
        let q_rot = &trace.q_rot[li];
        let k_rot = &trace.k_rot[li];
        let v_emb = &trace.v_emb[li];
        let mut dq_rot = Matrix::zeros(total, d);
        let mut dk_rot = Matrix::zeros(total, d);
        let mut dv_emb = Matrix::zeros(total, d);
        for t in 0..total {
            let dattn = matvec_t(&layer.wo, dx.row(t));
            let visible: Vec<usize> = (0..=t).filter(|&j| mask.get(t, j)).collect();
            for head in 0..nh {
                let lo = head * hd;
                let hi = lo + hd;
                let dout = &dattn[lo..hi];
                if dout.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let probs = &trace.probs[li][t][head];
                let mut dprobs = vec![0.0; visible.len()];
                for (jj, &j) in visible.iter().enumerate() {
                    let vj = &v_emb.row(j)[lo..hi];
                    let mut acc = 0.0;
                    for dd in 0..hd {
                        acc += dout[dd] * vj[dd];
                    }
                    dprobs[jj] = acc;
                    let dvj = &mut dv_emb.row_mut(j)[lo..hi];
                    for dd in 0..hd {
                        dvj[dd] += probs[jj] * dout[dd];
                    }
                }
                let sum_pd: f64 = probs.iter().zip(&dprobs).map(|(&p, &g)| p * g).sum();
                for (jj, &j) in visible.iter().enumerate() {
                    let ddot = probs[jj] * (dprobs[jj] - sum_pd) * inv_scale;
                    if ddot == 0.0 {
                        continue;
                    }
                    let kj = &k_rot.row(j)[lo..hi];
                    let qt = &q_rot.row(t)[lo..hi];
                    let dq = &mut dq_rot.row_mut(t)[lo..hi];
                    for dd in 0..hd {
                        dq[dd] += ddot * kj[dd];
                    }
                    let dk = &mut dk_rot.row_mut(j)[lo..hi];
                    for dd in 0..hd {
                        dk[dd] += ddot * qt[dd];
                    }
                }
            }
        }

        // un-rotate, collect embedding gradients, and push into the norms
        for t in 0..total {
            let pos = plan.pos(t) as i64;
            let path = plan.path_of(t);
            let mut dq_raw = vec![0.0; d];
            let mut dk_raw = vec![0.0; d];
            let mut dv_raw = vec![0.0; d];
            for head in 0..nh {
                let lo = head * hd;
                let hi = lo + hd;
                let dqh = rope::rotate(&dq_rot.row(t)[lo..hi], -pos, &model.rotary)?;
                dq_raw[lo..hi].copy_from_slice(&dqh);
                let dkh = rope::rotate(&dk_rot.row(t)[lo..hi], -pos, &model.rotary)?;
                dk_raw[lo..hi].copy_from_slice(&dkh);
                let dvh = &dv_emb.row(t)[lo..hi];
                dv_raw[lo..hi].copy_from_slice(dvh);
                if let Some(k) = path {
                    let row = &mut de[k - 1];
                    for dd in 0..hd {
                        row[dd] += dkh[dd] + dvh[dd];
                    }
                }
            }
            let mut dh = matvec_t(&layer.wq, &dq_raw);
            for (a, b) in dh.iter_mut().zip(matvec_t(&layer.wk, &dk_raw)) {
                *a += b;
            }
            for (a, b) in dh.iter_mut().zip(matvec_t(&layer.wv, &dv_raw)) {
                *a += b;
            }
            let back = rmsnorm_backward(
                &dh,
                trace.x_inputs[li].row(t),
                trace.attn_denoms[li][t],
                &layer.attn_norm,
            );
            for (a, b) in dx.row_mut(t).iter_mut().zip(&back) {
                *a += b;
            }
        }
    }

    Ok(de)
}
