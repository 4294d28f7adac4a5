//! Forward passes. Every routine is a pure function of (params, config,
//! input); the cached variants additionally return the intermediate values
//! the manual backward pass consumes.

use crate::dsp::AudioBuffer;
use crate::error::{Error, Result};
use crate::model::{MaskSpec, ModelConfig, ModelParams};
use crate::rng::derive_seed;

pub(crate) const NORM_EPS: f64 = 1e-5;
pub(crate) const COSINE_EPS: f64 = 1e-12;

/// Everything the heads produce for one clip.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Contrastive logits, row-major [frames × K × C]; bounded by 1/τ.
    pub rvq_logits: Vec<f64>,
    /// CQT regression, row-major [frames × cqt_bins].
    pub cqt_pred: Vec<f64>,
    /// Output of every transformer block, each [frames × d_model].
    pub hidden_states: Vec<Vec<f64>>,
    /// Final-normalized encoder output o_t, [frames × d_model].
    pub encoder_out: Vec<f64>,
    pub frames: usize,
}

impl ForwardOutput {
    pub fn logit(&self, cfg: &ModelConfig, t: usize, k: usize, c: usize) -> f64 {
        self.rvq_logits[(t * cfg.k + k) * cfg.c + c]
    }
}

/// GELU (tanh form) used by both the conv stack and the FFN.
pub(crate) fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

/// y[n×out] = x[n×in] · wᵀ + b  with w stored [out × in].
pub(crate) fn linear(x: &[f64], n: usize, d_in: usize, w: &[f64], b: Option<&[f64]>, d_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * d_out];
    for t in 0..n {
        let xr = &x[t * d_in..(t + 1) * d_in];
        let yr = &mut y[t * d_out..(t + 1) * d_out];
        for (o, yo) in yr.iter_mut().enumerate() {
            let wr = &w[o * d_in..(o + 1) * d_in];
            let mut acc = match b {
                Some(b) => b[o],
                None => 0.0,
            };
            for (xi, wi) in xr.iter().zip(wr) {
                acc += xi * wi;
            }
            *yo = acc;
        }
    }
    y
}

#[derive(Debug, Clone)]
pub struct NormCache {
    pub(crate) mean: Vec<f64>,
    pub(crate) inv_std: Vec<f64>,
    /// (x − μ)/σ before the affine transform, [n × d].
    pub(crate) xhat: Vec<f64>,
}

pub(crate) fn layer_norm(
    x: &[f64],
    n: usize,
    d: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, NormCache) {
    let mut y = vec![0.0; n * d];
    let mut cache = NormCache {
        mean: vec![0.0; n],
        inv_std: vec![0.0; n],
        xhat: vec![0.0; n * d],
    };
    for t in 0..n {
        let row = &x[t * d..(t + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + NORM_EPS).sqrt();
        cache.mean[t] = mean;
        cache.inv_std[t] = inv_std;
        for i in 0..d {
            let xhat = (row[i] - mean) * inv_std;
            cache.xhat[t * d + i] = xhat;
            y[t * d + i] = gamma[i] * xhat + beta[i];
        }
    }
    (y, cache)
}

/// Intermediates of the conv feature extractor.
#[derive(Debug, Clone)]
pub struct ConvCache {
    /// Zero-padded input of each layer, [in_ch × padded_len] row-major.
    pub(crate) inputs: Vec<Vec<f64>>,
    pub(crate) padded_lens: Vec<usize>,
    /// Pre-GELU output of each layer, [out_ch × out_len] row-major.
    pub(crate) pre_act: Vec<Vec<f64>>,
    pub(crate) out_lens: Vec<usize>,
}

pub fn feature_extractor_cached(
    params: &ModelParams,
    config: &ModelConfig,
    buf: &AudioBuffer,
) -> Result<(Vec<f64>, ConvCache)> {
    if buf.sample_rate != config.sample_rate {
        return Err(Error::InvalidInput(format!(
            "buffer rate {} != model rate {}",
            buf.sample_rate, config.sample_rate
        )));
    }
    if buf.len() < config.frame_stride {
        return Err(Error::InvalidInput(format!(
            "buffer of {} samples is shorter than one receptive field ({} samples)",
            buf.len(),
            config.frame_stride
        )));
    }
    let mut cache = ConvCache {
        inputs: Vec::new(),
        padded_lens: Vec::new(),
        pre_act: Vec::new(),
        out_lens: Vec::new(),
    };
    // Current activation, [channels × len] row-major; audio is one channel.
    let mut act = buf.samples.clone();
    let mut channels = 1usize;
    let mut len = buf.len();
    for (i, &(out_ch, kernel, stride)) in config.conv_channels.iter().enumerate() {
        let out_len = len.div_ceil(stride);
        // Right-pad with zeros so the last window is complete.
        let padded = (out_len - 1) * stride + kernel;
        let mut input = vec![0.0f64; channels * padded];
        for c in 0..channels {
            input[c * padded..c * padded + len].copy_from_slice(&act[c * len..(c + 1) * len]);
        }
        let w = params.f64_slice(&format!("conv/{i}/weight"))?;
        let b = params.f64_slice(&format!("conv/{i}/bias"))?;
        let mut pre = vec![0.0f64; out_ch * out_len];
        for o in 0..out_ch {
            for t in 0..out_len {
                let mut acc = b[o];
                for c in 0..channels {
                    let wr = &w[(o * channels + c) * kernel..(o * channels + c + 1) * kernel];
                    let xr = &input[c * padded + t * stride..c * padded + t * stride + kernel];
                    for (wi, xi) in wr.iter().zip(xr) {
                        acc += wi * xi;
                    }
                }
                pre[o * out_len + t] = acc;
            }
        }
        act = pre.iter().map(|&v| gelu(v)).collect();
        cache.inputs.push(input);
        cache.padded_lens.push(padded);
        cache.pre_act.push(pre);
        cache.out_lens.push(out_len);
        channels = out_ch;
        len = out_len;
    }
    // Transpose [d × T] → [T × d] frame-major features.
    let frames = len;
    let d = channels;
    debug_assert_eq!(frames, config.frames_for(buf.len()));
    let mut feats = vec![0.0f64; frames * d];
    for c in 0..d {
        for t in 0..frames {
            feats[t * d + c] = act[c * frames + t];
        }
    }
    Ok((feats, cache))
}

/// Raw audio → frame features, [frames × d_model]; 1 s at 24 kHz gives
/// exactly 75 frames.
pub fn feature_extractor_forward(
    params: &ModelParams,
    config: &ModelConfig,
    buf: &AudioBuffer,
) -> Result<Vec<f64>> {
    Ok(feature_extractor_cached(params, config, buf)?.0)
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    pub(crate) ln1: NormCache,
    pub(crate) q: Vec<f64>,
    pub(crate) k: Vec<f64>,
    pub(crate) v: Vec<f64>,
    /// Attention weights, [heads × T × T].
    pub(crate) probs: Vec<f64>,
    /// Concatenated head outputs before the output projection, [T × d].
    pub(crate) ctx: Vec<f64>,
    pub(crate) ln2: NormCache,
    /// FFN pre-activation, [T × ffn_dim].
    pub(crate) f1: Vec<f64>,
    /// FFN post-GELU, [T × ffn_dim].
    pub(crate) g: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    pub(crate) layers: Vec<LayerCache>,
    pub(crate) final_norm: NormCache,
    /// Projected embeddings u_t = T(o_t), [T × d_embed].
    pub(crate) u: Vec<f64>,
    pub(crate) u_norm: Vec<f64>,
    /// Codeword embedding norms, [K × C].
    pub(crate) e_norms: Vec<f64>,
    pub(crate) frames: usize,
}

pub fn encoder_forward_cached(
    params: &ModelParams,
    config: &ModelConfig,
    frame_feats: &[f64],
    mask: &MaskSpec,
) -> Result<(ForwardOutput, EncoderCache)> {
    let d = config.d_model;
    let frames = mask.total_frames();
    if frame_feats.len() != frames * d {
        return Err(Error::ShapeMismatch(format!(
            "features have {} values, expected {frames} frames × {d}",
            frame_feats.len()
        )));
    }
    if frames == 0 {
        return Err(Error::InvalidInput("encoder needs at least one frame".into()));
    }
    if frames > config.max_frames {
        return Err(Error::InvalidInput(format!(
            "{frames} frames exceed max_frames {}",
            config.max_frames
        )));
    }

    // Masked frames are replaced by the learned mask embedding, then learned
    // absolute positions are added.
    let mask_emb = params.f64_slice("mask/embedding")?;
    let pos = params.f64_slice("encoder/pos_emb")?;
    let mut x = vec![0.0f64; frames * d];
    for t in 0..frames {
        let src: &[f64] = if mask.is_masked(t) { mask_emb } else { &frame_feats[t * d..(t + 1) * d] };
        for i in 0..d {
            x[t * d + i] = src[i] + pos[t * d + i];
        }
    }

    let heads = config.n_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let ffn = config.ffn_dim();
    let mut layers = Vec::with_capacity(config.n_layers);
    let mut hidden_states = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = format!("encoder/layer{l}");
        let x_in = x.clone();
        let (xn, ln1) = layer_norm(
            &x,
            frames,
            d,
            params.f64_slice(&format!("{p}/norm1/gamma"))?,
            params.f64_slice(&format!("{p}/norm1/beta"))?,
        );
        let q = linear(&xn, frames, d, params.f64_slice(&format!("{p}/attn/wq"))?, Some(params.f64_slice(&format!("{p}/attn/bq"))?), d);
        let k = linear(&xn, frames, d, params.f64_slice(&format!("{p}/attn/wk"))?, Some(params.f64_slice(&format!("{p}/attn/bk"))?), d);
        let v = linear(&xn, frames, d, params.f64_slice(&format!("{p}/attn/wv"))?, Some(params.f64_slice(&format!("{p}/attn/bv"))?), d);

        let mut probs = vec![0.0f64; heads * frames * frames];
        let mut ctx = vec![0.0f64; frames * d];
        for h in 0..heads {
            let off = h * dh;
            for t in 0..frames {
                let prow = &mut probs[(h * frames + t) * frames..(h * frames + t + 1) * frames];
                let mut max = f64::NEG_INFINITY;
                for s in 0..frames {
                    let mut dot = 0.0;
                    for i in 0..dh {
                        dot += q[t * d + off + i] * k[s * d + off + i];
                    }
                    prow[s] = dot * scale;
                    max = max.max(prow[s]);
                }
                let mut sum = 0.0;
                for ps in prow.iter_mut() {
                    *ps = (*ps - max).exp();
                    sum += *ps;
                }
                for ps in prow.iter_mut() {
                    *ps /= sum;
                }
                for (s, &ps) in prow.iter().enumerate() {
                    for i in 0..dh {
                        ctx[t * d + off + i] += ps * v[s * d + off + i];
                    }
                }
            }
        }
        let attn_out = linear(&ctx, frames, d, params.f64_slice(&format!("{p}/attn/wo"))?, Some(params.f64_slice(&format!("{p}/attn/bo"))?), d);
        let mut x_mid = x_in.clone();
        for (xm, ao) in x_mid.iter_mut().zip(&attn_out) {
            *xm += ao;
        }

        let (x2n, ln2) = layer_norm(
            &x_mid,
            frames,
            d,
            params.f64_slice(&format!("{p}/norm2/gamma"))?,
            params.f64_slice(&format!("{p}/norm2/beta"))?,
        );
        let f1 = linear(&x2n, frames, d, params.f64_slice(&format!("{p}/ffn/w1"))?, Some(params.f64_slice(&format!("{p}/ffn/b1"))?), ffn);
        let g: Vec<f64> = f1.iter().map(|&v| gelu(v)).collect();
        let f2 = linear(&g, frames, ffn, params.f64_slice(&format!("{p}/ffn/w2"))?, Some(params.f64_slice(&format!("{p}/ffn/b2"))?), d);
        let mut x_out = x_mid.clone();
        for (xo, fo) in x_out.iter_mut().zip(&f2) {
            *xo += fo;
        }

        layers.push(LayerCache { ln1, q, k, v, probs, ctx, ln2, f1, g });
        hidden_states.push(x_out.clone());
        x = x_out;
    }

    let (o, final_norm) = layer_norm(
        &x,
        frames,
        d,
        params.f64_slice("encoder/final_norm/gamma")?,
        params.f64_slice("encoder/final_norm/beta")?,
    );

    // Contrastive head: cosine similarity between T(o_t) and each codeword
    // embedding, scaled by 1/τ — so |logit| stays below 1/τ.
    let de = config.d_embed;
    let u = linear(&o, frames, d, params.f64_slice("head/rvq/proj")?, None, de);
    let u_norm: Vec<f64> = (0..frames)
        .map(|t| u[t * de..(t + 1) * de].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut e_norms = vec![0.0f64; config.k * config.c];
    for k in 0..config.k {
        let emb = params.f64_slice(&format!("head/rvq/emb/{k}"))?;
        for c in 0..config.c {
            e_norms[k * config.c + c] =
                emb[c * de..(c + 1) * de].iter().map(|x| x * x).sum::<f64>().sqrt();
        }
    }
    let mut rvq_logits = vec![0.0f64; frames * config.k * config.c];
    for t in 0..frames {
        let ur = &u[t * de..(t + 1) * de];
        for k in 0..config.k {
            let emb = params.f64_slice(&format!("head/rvq/emb/{k}"))?;
            for c in 0..config.c {
                let er = &emb[c * de..(c + 1) * de];
                let dot: f64 = ur.iter().zip(er).map(|(a, b)| a * b).sum();
                let denom = u_norm[t] * e_norms[k * config.c + c] + COSINE_EPS;
                rvq_logits[(t * config.k + k) * config.c + c] = dot / (denom * config.tau);
            }
        }
    }

    let cqt_pred = linear(
        &o,
        frames,
        d,
        params.f64_slice("head/cqt/weight")?,
        Some(params.f64_slice("head/cqt/bias")?),
        config.cqt_bins,
    );

    let out = ForwardOutput { rvq_logits, cqt_pred, hidden_states, encoder_out: o, frames };
    let cache = EncoderCache { layers, final_norm, u, u_norm, e_norms, frames };
    Ok((out, cache))
}

/// Frame features + mask → heads. Masked frames have their input replaced by
/// the learned mask embedding before the encoder runs.
pub fn encoder_forward(
    params: &ModelParams,
    config: &ModelConfig,
    frame_feats: &[f64],
    mask: &MaskSpec,
) -> Result<ForwardOutput> {
    Ok(encoder_forward_cached(params, config, frame_feats, mask)?.0)
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) conv: ConvCache,
    pub(crate) encoder: EncoderCache,
}

pub fn full_forward_cached(
    params: &ModelParams,
    config: &ModelConfig,
    buf: &AudioBuffer,
    rng_seed: u64,
) -> Result<(ForwardOutput, MaskSpec, ForwardCache)> {
    let (feats, conv) = feature_extractor_cached(params, config, buf)?;
    let frames = config.frames_for(buf.len());
    let mask = super::apply_mask(
        frames,
        config.mask_start_prob,
        config.mask_span,
        derive_seed(rng_seed, &[0x3A5C]),
    )?;
    let (out, encoder) = encoder_forward_cached(params, config, &feats, &mask)?;
    Ok((out, mask, ForwardCache { conv, encoder }))
}

/// Audio → masked forward pass. The mask is drawn from `rng_seed`, so the
/// whole call is deterministic.
pub fn full_forward(
    params: &ModelParams,
    config: &ModelConfig,
    buf: &AudioBuffer,
    rng_seed: u64,
) -> Result<(ForwardOutput, MaskSpec)> {
    let (out, mask, _) = full_forward_cached(params, config, buf, rng_seed)?;
    Ok((out, mask))
}
