//! Manual reverse-mode gradients for the full model.
//!
//! Given the caches from the forward pass and the loss gradients w.r.t. the
//! head outputs, these routines produce a gradient TensorMap congruent with
//! the parameter schema. Verified against central finite differences in the
//! integration tests.

use crate::error::{Error, Result};
use crate::model::forward::{gelu_grad, EncoderCache, ForwardCache, NormCache, COSINE_EPS};
use crate::model::{MaskSpec, ModelConfig, ModelParams};
use crate::tensor::TensorMap;

/// Backward of y = γ·x̂ + β. Returns d_x; accumulates d_γ and d_β.
fn layer_norm_backward(
    d_y: &[f64],
    cache: &NormCache,
    gamma: &[f64],
    n: usize,
    d: usize,
    d_gamma: &mut [f64],
    d_beta: &mut [f64],
) -> Vec<f64> {
    let mut d_x = vec![0.0; n * d];
    for t in 0..n {
        let xhat = &cache.xhat[t * d..(t + 1) * d];
        let dy = &d_y[t * d..(t + 1) * d];
        let mut m1 = 0.0; // mean of γ·dy
        let mut m2 = 0.0; // mean of γ·dy·x̂
        for i in 0..d {
            let dh = dy[i] * gamma[i];
            d_gamma[i] += dy[i] * xhat[i];
            d_beta[i] += dy[i];
            m1 += dh;
            m2 += dh * xhat[i];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let r = cache.inv_std[t];
        for i in 0..d {
            let dh = dy[i] * gamma[i];
            d_x[t * d + i] = r * (dh - m1 - xhat[i] * m2);
        }
    }
    d_x
}

/// Backward of y = x·wᵀ + b. Returns d_x; accumulates d_w (and d_b if the
/// layer has a bias).
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &[f64],
    n: usize,
    d_in: usize,
    w: &[f64],
    d_out: usize,
    d_y: &[f64],
    d_w: &mut [f64],
    mut d_b: Option<&mut [f64]>,
) -> Vec<f64> {
    let mut d_x = vec![0.0; n * d_in];
    for t in 0..n {
        let xr = &x[t * d_in..(t + 1) * d_in];
        let dyr = &d_y[t * d_out..(t + 1) * d_out];
        for (o, &dyo) in dyr.iter().enumerate() {
            if let Some(db) = d_b.as_deref_mut() {
                db[o] += dyo;
            }
            let wr = &w[o * d_in..(o + 1) * d_in];
            let dwr = &mut d_w[o * d_in..(o + 1) * d_in];
            let dxr = &mut d_x[t * d_in..(t + 1) * d_in];
            for i in 0..d_in {
                dwr[i] += dyo * xr[i];
                dxr[i] += dyo * wr[i];
            }
        }
    }
    d_x
}

/// Rebuild a norm layer's output from its cache (saves storing it).
fn normed_output(cache: &NormCache, gamma: &[f64], beta: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * d];
    for t in 0..n {
        for i in 0..d {
            y[t * d + i] = gamma[i] * cache.xhat[t * d + i] + beta[i];
        }
    }
    y
}

/// Gradients for everything downstream of the frame features: heads,
/// transformer, positional and mask embeddings. Returns the gradient map
/// (conv entries left at zero) and d_feats for the extractor.
pub fn encoder_backward(
    params: &ModelParams,
    config: &ModelConfig,
    cache: &EncoderCache,
    mask: &MaskSpec,
    d_logits: &[f64],
    d_cqt: &[f64],
) -> Result<(TensorMap, Vec<f64>)> {
    let d = config.d_model;
    let de = config.d_embed;
    let frames = cache.frames;
    if d_logits.len() != frames * config.k * config.c {
        return Err(Error::ShapeMismatch(format!(
            "d_logits has {} values, expected {}",
            d_logits.len(),
            frames * config.k * config.c
        )));
    }
    if d_cqt.len() != frames * config.cqt_bins {
        return Err(Error::ShapeMismatch(format!(
            "d_cqt has {} values, expected {}",
            d_cqt.len(),
            frames * config.cqt_bins
        )));
    }
    let mut grads = params.zeros_like();
    let o = normed_output(
        &cache.final_norm,
        params.f64_slice("encoder/final_norm/gamma")?,
        params.f64_slice("encoder/final_norm/beta")?,
        frames,
        d,
    );

    // --- CQT head ---
    let mut d_o = {
        let w = params.f64_slice("head/cqt/weight")?;
        let mut d_w = vec![0.0; w.len()];
        let mut d_b = vec![0.0; config.cqt_bins];
        let d_o = linear_backward(&o, frames, d, w, config.cqt_bins, d_cqt, &mut d_w, Some(&mut d_b));
        grads.get_mut("head/cqt/weight")?.as_f64_mut()?.copy_from_slice(&d_w);
        grads.get_mut("head/cqt/bias")?.as_f64_mut()?.copy_from_slice(&d_b);
        d_o
    };

    // --- Contrastive head ---
    // logit = dot(u, e) / ((|u|·|e| + ε)·τ); differentiate w.r.t. u and e.
    let mut d_u = vec![0.0; frames * de];
    for k in 0..config.k {
        let emb = params.f64_slice(&format!("head/rvq/emb/{k}"))?;
        let d_emb = grads.get_mut(&format!("head/rvq/emb/{k}"))?.as_f64_mut()?;
        for t in 0..frames {
            let ur = &cache.u[t * de..(t + 1) * de];
            let nu = cache.u_norm[t];
            let inv_nu = if nu > 0.0 { 1.0 / nu } else { 0.0 };
            for c in 0..config.c {
                let dl = d_logits[(t * config.k + k) * config.c + c];
                if dl == 0.0 {
                    continue;
                }
                let er = &emb[c * de..(c + 1) * de];
                let ne = cache.e_norms[k * config.c + c];
                let inv_ne = if ne > 0.0 { 1.0 / ne } else { 0.0 };
                let denom = nu * ne + COSINE_EPS;
                let dot: f64 = ur.iter().zip(er).map(|(a, b)| a * b).sum();
                let a = dl / (denom * config.tau);
                let b = dl * dot / (denom * denom * config.tau);
                for i in 0..de {
                    d_u[t * de + i] += a * er[i] - b * ne * ur[i] * inv_nu;
                    d_emb[c * de + i] += a * ur[i] - b * nu * er[i] * inv_ne;
                }
            }
        }
    }
    {
        let p = params.f64_slice("head/rvq/proj")?;
        let mut d_p = vec![0.0; p.len()];
        let d_o_proj = linear_backward(&o, frames, d, p, de, &d_u, &mut d_p, None);
        grads.get_mut("head/rvq/proj")?.as_f64_mut()?.copy_from_slice(&d_p);
        for (a, b) in d_o.iter_mut().zip(&d_o_proj) {
            *a += b;
        }
    }

    // --- Final norm ---
    let mut d_x = {
        let gamma = params.f64_slice("encoder/final_norm/gamma")?;
        let mut d_gamma = vec![0.0; d];
        let mut d_beta = vec![0.0; d];
        let d_x =
            layer_norm_backward(&d_o, &cache.final_norm, gamma, frames, d, &mut d_gamma, &mut d_beta);
        grads.get_mut("encoder/final_norm/gamma")?.as_f64_mut()?.copy_from_slice(&d_gamma);
        grads.get_mut("encoder/final_norm/beta")?.as_f64_mut()?.copy_from_slice(&d_beta);
        d_x
    };

    // --- Transformer blocks, reversed ---
    let heads = config.n_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let ffn = config.ffn_dim();
    for l in (0..config.n_layers).rev() {
        let p = format!("encoder/layer{l}");
        let lc = &cache.layers[l];

        // FFN half: x_out = x_mid + W2·gelu(W1·LN2(x_mid) + b1) + b2.
        let mut d_x_mid = d_x.clone();
        {
            let w2 = params.f64_slice(&format!("{p}/ffn/w2"))?;
            let mut d_w2 = vec![0.0; w2.len()];
            let mut d_b2 = vec![0.0; d];
            let d_g = linear_backward(&lc.g, frames, ffn, w2, d, &d_x, &mut d_w2, Some(&mut d_b2));
            grads.get_mut(&format!("{p}/ffn/w2"))?.as_f64_mut()?.copy_from_slice(&d_w2);
            grads.get_mut(&format!("{p}/ffn/b2"))?.as_f64_mut()?.copy_from_slice(&d_b2);

            let d_f1: Vec<f64> =
                d_g.iter().zip(&lc.f1).map(|(dg, &f)| dg * gelu_grad(f)).collect();
            let gamma2 = params.f64_slice(&format!("{p}/norm2/gamma"))?;
            let beta2 = params.f64_slice(&format!("{p}/norm2/beta"))?;
            let x2n = normed_output(&lc.ln2, gamma2, beta2, frames, d);
            let w1 = params.f64_slice(&format!("{p}/ffn/w1"))?;
            let mut d_w1 = vec![0.0; w1.len()];
            let mut d_b1 = vec![0.0; ffn];
            let d_x2n = linear_backward(&x2n, frames, d, w1, ffn, &d_f1, &mut d_w1, Some(&mut d_b1));
            grads.get_mut(&format!("{p}/ffn/w1"))?.as_f64_mut()?.copy_from_slice(&d_w1);
            grads.get_mut(&format!("{p}/ffn/b1"))?.as_f64_mut()?.copy_from_slice(&d_b1);

            let mut d_gamma = vec![0.0; d];
            let mut d_beta = vec![0.0; d];
            let d_ln2_in =
                layer_norm_backward(&d_x2n, &lc.ln2, gamma2, frames, d, &mut d_gamma, &mut d_beta);
            grads.get_mut(&format!("{p}/norm2/gamma"))?.as_f64_mut()?.copy_from_slice(&d_gamma);
            grads.get_mut(&format!("{p}/norm2/beta"))?.as_f64_mut()?.copy_from_slice(&d_beta);
            for (a, b) in d_x_mid.iter_mut().zip(&d_ln2_in) {
                *a += b;
            }
        }

        // Attention half: x_mid = x_in + Wo·attend(LN1(x_in)) + bo.
        let mut d_x_in = d_x_mid.clone();
        {
            let wo = params.f64_slice(&format!("{p}/attn/wo"))?;
            let mut d_wo = vec![0.0; wo.len()];
            let mut d_bo = vec![0.0; d];
            let d_ctx =
                linear_backward(&lc.ctx, frames, d, wo, d, &d_x_mid, &mut d_wo, Some(&mut d_bo));
            grads.get_mut(&format!("{p}/attn/wo"))?.as_f64_mut()?.copy_from_slice(&d_wo);
            grads.get_mut(&format!("{p}/attn/bo"))?.as_f64_mut()?.copy_from_slice(&d_bo);

            let mut d_q = vec![0.0; frames * d];
            let mut d_k = vec![0.0; frames * d];
            let mut d_v = vec![0.0; frames * d];
            for h in 0..heads {
                let off = h * dh;
                for t in 0..frames {
                    let prow = &lc.probs[(h * frames + t) * frames..(h * frames + t + 1) * frames];
                    // d_P[t,s] and the softmax Jacobian.
                    let mut d_p_row = vec![0.0; frames];
                    for (s, dp) in d_p_row.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for i in 0..dh {
                            acc += d_ctx[t * d + off + i] * lc.v[s * d + off + i];
                        }
                        *dp = acc;
                    }
                    let dot: f64 = prow.iter().zip(&d_p_row).map(|(p, dp)| p * dp).sum();
                    for s in 0..frames {
                        let d_score = prow[s] * (d_p_row[s] - dot);
                        for i in 0..dh {
                            d_q[t * d + off + i] += scale * d_score * lc.k[s * d + off + i];
                            d_k[s * d + off + i] += scale * d_score * lc.q[t * d + off + i];
                        }
                    }
                    for s in 0..frames {
                        let pr = prow[s];
                        for i in 0..dh {
                            d_v[s * d + off + i] += pr * d_ctx[t * d + off + i];
                        }
                    }
                }
            }

            let gamma1 = params.f64_slice(&format!("{p}/norm1/gamma"))?;
            let beta1 = params.f64_slice(&format!("{p}/norm1/beta"))?;
            let x1n = normed_output(&lc.ln1, gamma1, beta1, frames, d);
            let mut d_x1n = vec![0.0; frames * d];
            for (name, dname, dvec) in
                [("wq", "bq", &d_q), ("wk", "bk", &d_k), ("wv", "bv", &d_v)]
            {
                let w = params.f64_slice(&format!("{p}/attn/{name}"))?;
                let mut d_w = vec![0.0; w.len()];
                let mut d_b = vec![0.0; d];
                let dx = linear_backward(&x1n, frames, d, w, d, dvec, &mut d_w, Some(&mut d_b));
                grads.get_mut(&format!("{p}/attn/{name}"))?.as_f64_mut()?.copy_from_slice(&d_w);
                grads.get_mut(&format!("{p}/attn/{dname}"))?.as_f64_mut()?.copy_from_slice(&d_b);
                for (a, b) in d_x1n.iter_mut().zip(&dx) {
                    *a += b;
                }
            }
            let mut d_gamma = vec![0.0; d];
            let mut d_beta = vec![0.0; d];
            let d_ln1_in =
                layer_norm_backward(&d_x1n, &lc.ln1, gamma1, frames, d, &mut d_gamma, &mut d_beta);
            grads.get_mut(&format!("{p}/norm1/gamma"))?.as_f64_mut()?.copy_from_slice(&d_gamma);
            grads.get_mut(&format!("{p}/norm1/beta"))?.as_f64_mut()?.copy_from_slice(&d_beta);
            for (a, b) in d_x_in.iter_mut().zip(&d_ln1_in) {
                *a += b;
            }
        }
        d_x = d_x_in;
    }

    // --- Input construction: x0[t] = (masked ? m : feats[t]) + pos[t] ---
    let mut d_feats = vec![0.0; frames * d];
    {
        let d_pos = grads.get_mut("encoder/pos_emb")?.as_f64_mut()?;
        for t in 0..frames {
            for i in 0..d {
                d_pos[t * d + i] += d_x[t * d + i];
            }
        }
    }
    {
        let d_mask = grads.get_mut("mask/embedding")?.as_f64_mut()?;
        for t in 0..frames {
            if mask.is_masked(t) {
                for i in 0..d {
                    d_mask[i] += d_x[t * d + i];
                }
            } else {
                d_feats[t * d..(t + 1) * d].copy_from_slice(&d_x[t * d..(t + 1) * d]);
            }
        }
    }
    Ok((grads, d_feats))
}

/// Full gradients: encoder backward, then through the conv feature
/// extractor. `d_logits` and `d_cqt` are the loss gradients w.r.t.
/// `rvq_logits` and `cqt_pred`.
pub fn full_backward(
    params: &ModelParams,
    config: &ModelConfig,
    cache: &ForwardCache,
    mask: &MaskSpec,
    d_logits: &[f64],
    d_cqt: &[f64],
) -> Result<TensorMap> {
    let (mut grads, d_feats) =
        encoder_backward(params, config, &cache.encoder, mask, d_logits, d_cqt)?;

    // Transpose d_feats [T × d] to channel-major [d × T] for the conv stack.
    let frames = cache.encoder.frames;
    let d = config.d_model;
    let mut d_act = vec![0.0; d * frames];
    for t in 0..frames {
        for c in 0..d {
            d_act[c * frames + t] = d_feats[t * d + c];
        }
    }

    let n_layers = config.conv_channels.len();
    for i in (0..n_layers).rev() {
        let (out_ch, kernel, stride) = config.conv_channels[i];
        let in_ch = if i == 0 { 1 } else { config.conv_channels[i - 1].0 };
        let out_len = cache.conv.out_lens[i];
        let padded = cache.conv.padded_lens[i];
        let input = &cache.conv.inputs[i];
        let pre = &cache.conv.pre_act[i];
        let w = params.f64_slice(&format!("conv/{i}/weight"))?;

        let mut d_input = vec![0.0; in_ch * padded];
        {
            let d_w = grads.get_mut(&format!("conv/{i}/weight"))?.as_f64_mut()?;
            for o in 0..out_ch {
                for t in 0..out_len {
                    let d_pre = d_act[o * out_len + t] * gelu_grad(pre[o * out_len + t]);
                    if d_pre == 0.0 {
                        continue;
                    }
                    for c in 0..in_ch {
                        let base_w = (o * in_ch + c) * kernel;
                        let base_x = c * padded + t * stride;
                        for j in 0..kernel {
                            d_w[base_w + j] += d_pre * input[base_x + j];
                            d_input[base_x + j] += d_pre * w[base_w + j];
                        }
                    }
                }
            }
        }
        {
            let d_b = grads.get_mut(&format!("conv/{i}/bias"))?.as_f64_mut()?;
            for o in 0..out_ch {
                for t in 0..out_len {
                    d_b[o] += d_act[o * out_len + t] * gelu_grad(pre[o * out_len + t]);
                }
            }
        }
        if i > 0 {
            // Drop gradients on the zero padding; the previous layer's output
            // length is this layer's unpadded input length.
            let prev_len = cache.conv.out_lens[i - 1];
            let mut next = vec![0.0; in_ch * prev_len];
            for c in 0..in_ch {
                next[c * prev_len..(c + 1) * prev_len]
                    .copy_from_slice(&d_input[c * padded..c * padded + prev_len]);
            }
            d_act = next;
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::synth_sine;
    use crate::model::forward::full_forward_cached;
    use crate::model::init_model;

    #[test]
    fn gradients_cover_the_schema_and_stay_finite() {
        let cfg = crate::model::forward::tests::tiny_config();
        let params = init_model(&cfg).unwrap();
        let buf = synth_sine(440.0, 0.1, 24_000, 0.5).unwrap();
        let (out, mask, cache) = full_forward_cached(&params, &cfg, &buf, 2).unwrap();
        let d_logits = vec![0.01; out.rvq_logits.len()];
        let d_cqt = vec![0.02; out.cqt_pred.len()];
        let grads = full_backward(&params, &cfg, &cache, &mask, &d_logits, &d_cqt).unwrap();
        assert!(grads.congruent(&params));
        for (name, g) in grads.iter() {
            assert!(g.all_finite(), "{name} has non-finite gradient");
        }
    }

    #[test]
    fn empty_mask_zeroes_the_mask_embedding_gradient() {
        let cfg = crate::model::forward::tests::tiny_config();
        let params = init_model(&cfg).unwrap();
        let buf = synth_sine(440.0, 0.1, 24_000, 0.5).unwrap();
        let mut cfg_nomask = cfg.clone();
        cfg_nomask.mask_start_prob = 0.0;
        let (out, mask, cache) = full_forward_cached(&params, &cfg_nomask, &buf, 2).unwrap();
        assert_eq!(mask.masked_count(), 0);
        let d_logits = vec![0.5; out.rvq_logits.len()];
        let d_cqt = vec![0.5; out.cqt_pred.len()];
        let grads = full_backward(&params, &cfg_nomask, &cache, &mask, &d_logits, &d_cqt).unwrap();
        assert!(grads.get("mask/embedding").unwrap().iter_f64().all(|x| x == 0.0));
        // Everything upstream still gets signal.
        assert!(grads.get("conv/0/weight").unwrap().iter_f64().any(|x| x != 0.0));
    }
}
