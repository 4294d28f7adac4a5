//! The student network: convolutional feature extractor (raw audio → 75 Hz
//! frames), pre-normalized transformer encoder, frame masking, and two
//! prediction heads (per-codebook contrastive logits; CQT regression).
//!
//! Parameters live in a [`TensorMap`] under a canonical name schema so
//! checkpoints from any run are merge-compatible:
//!
//! ```text
//! conv/{i}/weight            [out_ch, in_ch, kernel]
//! conv/{i}/bias              [out_ch]
//! encoder/pos_emb            [max_frames, d_model]
//! encoder/layer{i}/norm1/gamma|beta          [d_model]
//! encoder/layer{i}/attn/wq|wk|wv|wo          [d_model, d_model]
//! encoder/layer{i}/attn/bq|bk|bv|bo          [d_model]
//! encoder/layer{i}/norm2/gamma|beta          [d_model]
//! encoder/layer{i}/ffn/w1    [4·d_model, d_model]
//! encoder/layer{i}/ffn/b1    [4·d_model]
//! encoder/layer{i}/ffn/w2    [d_model, 4·d_model]
//! encoder/layer{i}/ffn/b2    [d_model]
//! encoder/final_norm/gamma|beta              [d_model]
//! head/rvq/proj              [d_embed, d_model]
//! head/rvq/emb/{k}           [C, d_embed]
//! head/cqt/weight            [cqt_bins, d_model]
//! head/cqt/bias              [cqt_bins]
//! mask/embedding             [d_model]
//! ```

pub mod backward;
pub mod forward;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{next_gaussian, rng_from_seed};
use crate::tensor::{Tensor, TensorMap};

/// Model parameters are a plain named-tensor collection.
pub type ModelParams = TensorMap;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub sample_rate: u32,
    /// Samples per frame; the conv strides must multiply to this.
    pub frame_stride: usize,
    /// Feature extractor layers as (channels, kernel, stride).
    pub conv_channels: Vec<(usize, usize, usize)>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Codebook count of the tokenizer this model predicts.
    pub k: usize,
    /// Codewords per codebook.
    pub c: usize,
    /// Dimension of the codeword embedding space the encoder output is
    /// projected into for the contrastive head.
    pub d_embed: usize,
    pub cqt_bins: usize,
    /// Contrastive temperature.
    pub tau: f64,
    pub mask_start_prob: f64,
    /// Masked span length in frames.
    pub mask_span: usize,
    /// Longest supported sequence (learned positional embeddings).
    pub max_frames: usize,
    pub rng_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            sample_rate: 24_000,
            frame_stride: 320,
            conv_channels: vec![(64, 5, 5), (64, 4, 4), (64, 4, 4), (64, 2, 2), (64, 2, 2)],
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            k: 2,
            c: 32,
            d_embed: 32,
            cqt_bins: 84,
            tau: 0.1,
            mask_start_prob: 0.08,
            mask_span: 10,
            max_frames: 512,
            rng_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() {
            return Err(Error::InvalidInput("conv_channels must be non-empty".into()));
        }
        let stride_product: usize = self.conv_channels.iter().map(|&(_, _, s)| s).product();
        if stride_product != self.frame_stride {
            return Err(Error::InvalidInput(format!(
                "conv stride product {stride_product} != frame_stride {}",
                self.frame_stride
            )));
        }
        for &(ch, k, s) in &self.conv_channels {
            if ch == 0 || k == 0 || s == 0 || k < s {
                return Err(Error::InvalidInput(format!(
                    "bad conv layer (channels {ch}, kernel {k}, stride {s}); need kernel >= stride >= 1"
                )));
            }
        }
        let last_ch = self.conv_channels.last().map(|&(ch, _, _)| ch).unwrap_or(0);
        if last_ch != self.d_model {
            return Err(Error::InvalidInput(format!(
                "last conv layer has {last_ch} channels but d_model is {}; the \
                 extractor output feeds the encoder directly",
                self.d_model
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidInput(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.tau <= 0.0 {
            return Err(Error::InvalidInput("tau must be positive".into()));
        }
        if self.k == 0 || self.c == 0 || self.d_embed == 0 || self.cqt_bins == 0 {
            return Err(Error::InvalidInput("k, c, d_embed, cqt_bins must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_start_prob) || self.mask_span == 0 {
            return Err(Error::InvalidInput("bad masking parameters".into()));
        }
        if self.sample_rate == 0 || self.frame_stride == 0 || self.max_frames == 0 {
            return Err(Error::InvalidInput("rates and limits must be positive".into()));
        }
        Ok(())
    }

    /// Frames produced for `len` samples: ceil(len / frame_stride).
    pub fn frames_for(&self, len: usize) -> usize {
        len.div_ceil(self.frame_stride)
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }

    /// Stable digest of the configuration; checkpoints carry it so merge and
    /// resume can refuse mismatched architectures.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        format!("{:x}", h.finalize())[..16].to_string()
    }
}

/// Parameter groups for staged freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Conv,
    CodewordEmb,
    Transformer,
    Heads,
    MaskEmb,
}

impl ParamGroup {
    /// Which group a canonical parameter name belongs to.
    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("conv/") {
            ParamGroup::Conv
        } else if name.starts_with("head/rvq/emb/") {
            ParamGroup::CodewordEmb
        } else if name.starts_with("encoder/") {
            ParamGroup::Transformer
        } else if name.starts_with("head/") {
            ParamGroup::Heads
        } else {
            ParamGroup::MaskEmb
        }
    }

    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Conv,
        ParamGroup::CodewordEmb,
        ParamGroup::Transformer,
        ParamGroup::Heads,
        ParamGroup::MaskEmb,
    ];
}

/// Canonical (name, shape) listing in construction order.
pub fn parameter_schema(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let mut out = Vec::new();
    let mut in_ch = 1;
    for (i, &(ch, kernel, _)) in config.conv_channels.iter().enumerate() {
        out.push((format!("conv/{i}/weight"), vec![ch, in_ch, kernel]));
        out.push((format!("conv/{i}/bias"), vec![ch]));
        in_ch = ch;
    }
    out.push(("encoder/pos_emb".into(), vec![config.max_frames, d]));
    for i in 0..config.n_layers {
        let p = format!("encoder/layer{i}");
        out.push((format!("{p}/norm1/gamma"), vec![d]));
        out.push((format!("{p}/norm1/beta"), vec![d]));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{p}/attn/{w}"), vec![d, d]));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            out.push((format!("{p}/attn/{b}"), vec![d]));
        }
        out.push((format!("{p}/norm2/gamma"), vec![d]));
        out.push((format!("{p}/norm2/beta"), vec![d]));
        out.push((format!("{p}/ffn/w1"), vec![config.ffn_dim(), d]));
        out.push((format!("{p}/ffn/b1"), vec![config.ffn_dim()]));
        out.push((format!("{p}/ffn/w2"), vec![d, config.ffn_dim()]));
        out.push((format!("{p}/ffn/b2"), vec![d]));
    }
    out.push(("encoder/final_norm/gamma".into(), vec![d]));
    out.push(("encoder/final_norm/beta".into(), vec![d]));
    out.push(("head/rvq/proj".into(), vec![config.d_embed, d]));
    for k in 0..config.k {
        out.push((format!("head/rvq/emb/{k}"), vec![config.c, config.d_embed]));
    }
    out.push(("head/cqt/weight".into(), vec![config.cqt_bins, d]));
    out.push(("head/cqt/bias".into(), vec![config.cqt_bins]));
    out.push(("mask/embedding".into(), vec![d]));
    out
}

fn is_bias_like(name: &str) -> bool {
    let last = name.rsplit('/').next().unwrap_or(name);
    matches!(last, "bias" | "beta" | "b1" | "b2" | "bq" | "bk" | "bv" | "bo")
}

fn is_norm_gain(name: &str) -> bool {
    name.ends_with("/gamma")
}

/// Seeded initialization: Gaussian fan-in scaling for weight matrices, zeros
/// for biases and norm shifts, ones for norm gains, a small Gaussian for the
/// positional table, and a unit Gaussian for the mask embedding. Tensors are
/// drawn in schema order from a single stream, so equal configs give
/// bitwise-identical parameters.
pub fn init_model(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = rng_from_seed(config.rng_seed);
    let mut params = TensorMap::new();
    for (name, shape) in parameter_schema(config) {
        let count: usize = shape.iter().product();
        let data: Vec<f64> = if is_bias_like(&name) {
            vec![0.0; count]
        } else if is_norm_gain(&name) {
            vec![1.0; count]
        } else if name == "mask/embedding" {
            (0..count).map(|_| next_gaussian(&mut rng)).collect()
        } else if name == "encoder/pos_emb" {
            (0..count).map(|_| 0.01 * next_gaussian(&mut rng)).collect()
        } else {
            // fan_in = product of all but the leading (output) dimension
            let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
            let std = 1.0 / (fan_in as f64).sqrt();
            (0..count).map(|_| std * next_gaussian(&mut rng)).collect()
        };
        params.insert(&name, Tensor::from_f64(shape, data)?)?;
    }
    Ok(params)
}

/// Check that `params` carries exactly the canonical schema with finite
/// values.
pub fn validate_params(params: &ModelParams, config: &ModelConfig) -> Result<()> {
    let schema = parameter_schema(config);
    if params.len() != schema.len() {
        return Err(Error::ShapeMismatch(format!(
            "parameter count {} != schema count {}",
            params.len(),
            schema.len()
        )));
    }
    for (name, shape) in &schema {
        let t = params.get(name)?;
        if &t.shape != shape {
            return Err(Error::ShapeMismatch(format!(
                "{name}: shape {:?} != schema {:?}",
                t.shape, shape
            )));
        }
        if !t.all_finite() {
            return Err(Error::Training(format!("{name}: non-finite values")));
        }
    }
    Ok(())
}

/// The set of masked time frames within a fixed-length sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    masked: Vec<bool>,
}

impl MaskSpec {
    pub fn from_flags(masked: Vec<bool>) -> Self {
        MaskSpec { masked }
    }

    pub fn empty(total_frames: usize) -> Self {
        MaskSpec { masked: vec![false; total_frames] }
    }

    pub fn total_frames(&self) -> usize {
        self.masked.len()
    }

    pub fn is_masked(&self, t: usize) -> bool {
        self.masked[t]
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// Masked frame indices in increasing order.
    pub fn masked_frames(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&t| self.masked[t]).collect()
    }
}

/// Span masking: each frame is independently a span start with probability
/// `mask_start_prob`; spans of `mask_span` frames (clipped at the end) are
/// unioned.
pub fn apply_mask(
    frames: usize,
    mask_start_prob: f64,
    mask_span: usize,
    rng_seed: u64,
) -> Result<MaskSpec> {
    if frames == 0 {
        return Err(Error::InvalidInput("apply_mask: frames must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&mask_start_prob) || mask_span == 0 {
        return Err(Error::InvalidInput("bad masking parameters".into()));
    }
    let mut rng = rng_from_seed(rng_seed);
    let mut masked = vec![false; frames];
    for t in 0..frames {
        if rng.gen::<f64>() < mask_start_prob {
            for flag in masked.iter_mut().skip(t).take(mask_span) {
                *flag = true;
            }
        }
    }
    Ok(MaskSpec::from_flags(masked))
}
