//! The multi-task objective: masked-token NCE plus masked CQT regression,
//! combined as total = α·rvq + cqt.
//!
//! Both components average over the masked frames only (the NCE additionally
//! over codebooks), so magnitudes are comparable across batch sizes. An
//! empty mask is a documented sentinel: the loss is 0, nothing divides by
//! zero, and `masked_frame_count` records the event.

use crate::dsp::cqt::CqtMatrix;
use crate::error::{Error, Result};
use crate::model::forward::ForwardOutput;
use crate::model::MaskSpec;
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Weight of the token-prediction loss in the combined objective.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub rvq: f64,
    pub cqt: f64,
    pub total: f64,
    pub masked_frame_count: usize,
}

/// Gradients of the combined loss w.r.t. the head outputs, shaped like
/// `rvq_logits` and `cqt_pred`.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub d_logits: Vec<f64>,
    pub d_cqt: Vec<f64>,
}

fn check_token_shapes(logits: &[f64], targets: &TokenSequence, mask: &MaskSpec) -> Result<()> {
    if targets.frames != mask.total_frames() {
        return Err(Error::ShapeMismatch(format!(
            "targets cover {} frames, mask covers {}",
            targets.frames,
            mask.total_frames()
        )));
    }
    if logits.len() != targets.frames * targets.k * targets.c {
        return Err(Error::ShapeMismatch(format!(
            "logits have {} values, expected {}×{}×{}",
            logits.len(),
            targets.frames,
            targets.k,
            targets.c
        )));
    }
    Ok(())
}

/// Mean over (t ∈ M, codebook k) of −log softmax(logits[t,k,:])[target].
pub fn rvq_nce_loss(logits: &[f64], targets: &TokenSequence, mask: &MaskSpec) -> Result<f64> {
    Ok(rvq_nce_loss_with_grads(logits, targets, mask, None)?.0)
}

/// As [`rvq_nce_loss`]; when `d_logits` is given, adds the loss gradient
/// (scaled by `grad_scale` from the caller via the slice it hands in).
fn rvq_nce_loss_with_grads(
    logits: &[f64],
    targets: &TokenSequence,
    mask: &MaskSpec,
    mut d_logits: Option<(&mut [f64], f64)>,
) -> Result<(f64, usize)> {
    check_token_shapes(logits, targets, mask)?;
    let (k_books, c) = (targets.k, targets.c);
    let masked = mask.masked_count();
    if masked == 0 {
        return Ok((0.0, 0));
    }
    let norm = 1.0 / (masked * k_books) as f64;
    let mut loss = 0.0;
    let mut probs = vec![0.0f64; c];
    for t in 0..targets.frames {
        if !mask.is_masked(t) {
            continue;
        }
        for k in 0..k_books {
            let row = &logits[(t * k_books + k) * c..(t * k_books + k + 1) * c];
            let target = targets.token(t, k) as usize;
            if target >= c {
                return Err(Error::InvalidInput(format!(
                    "target token {target} out of range [0, {c})"
                )));
            }
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for (pc, &l) in probs.iter_mut().zip(row) {
                *pc = (l - max).exp();
                sum += *pc;
            }
            // −log p[target] = log(Σ e^{l−max}) − (l_target − max)
            loss += sum.ln() - (row[target] - max);
            if let Some((ref mut d, scale)) = d_logits {
                let base = (t * k_books + k) * c;
                for (cc, &p) in probs.iter().enumerate() {
                    let grad = (p / sum - if cc == target { 1.0 } else { 0.0 }) * norm;
                    d[base + cc] += scale * grad;
                }
            }
        }
    }
    Ok((loss * norm, masked))
}

/// Mean over masked frames of the squared error ‖target_t − pred_t‖².
pub fn cqt_mse_loss(pred: &[f64], target: &CqtMatrix, mask: &MaskSpec) -> Result<f64> {
    cqt_mse_loss_with_grads(pred, target, mask, None)
}

fn cqt_mse_loss_with_grads(
    pred: &[f64],
    target: &CqtMatrix,
    mask: &MaskSpec,
    mut d_pred: Option<(&mut [f64], f64)>,
) -> Result<f64> {
    if target.frames != mask.total_frames() {
        return Err(Error::ShapeMismatch(format!(
            "CQT target covers {} frames, mask covers {}",
            target.frames,
            mask.total_frames()
        )));
    }
    if pred.len() != target.frames * target.bins {
        return Err(Error::ShapeMismatch(format!(
            "CQT prediction has {} values, expected {}×{}",
            pred.len(),
            target.frames,
            target.bins
        )));
    }
    let masked = mask.masked_count();
    if masked == 0 {
        return Ok(0.0);
    }
    let norm = 1.0 / masked as f64;
    let bins = target.bins;
    let mut loss = 0.0;
    for t in 0..target.frames {
        if !mask.is_masked(t) {
            continue;
        }
        for b in 0..bins {
            let diff = pred[t * bins + b] - target.at(t, b);
            loss += diff * diff;
            if let Some((ref mut d, scale)) = d_pred {
                d[t * bins + b] += scale * 2.0 * diff * norm;
            }
        }
    }
    Ok(loss * norm)
}

/// total = α·rvq + cqt over the masked frames.
pub fn combined_loss(
    out: &ForwardOutput,
    targets: &TokenSequence,
    cqt: &CqtMatrix,
    mask: &MaskSpec,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    Ok(combined_loss_with_grads(out, targets, cqt, mask, cfg)?.0)
}

/// Loss plus its gradients w.r.t. the head outputs (for the backward pass).
pub fn combined_loss_with_grads(
    out: &ForwardOutput,
    targets: &TokenSequence,
    cqt: &CqtMatrix,
    mask: &MaskSpec,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, LossGrads)> {
    if cfg.alpha < 0.0 {
        return Err(Error::InvalidInput("alpha must be >= 0".into()));
    }
    let mut d_logits = vec![0.0f64; out.rvq_logits.len()];
    let mut d_cqt = vec![0.0f64; out.cqt_pred.len()];
    let (rvq, masked_frame_count) = rvq_nce_loss_with_grads(
        &out.rvq_logits,
        targets,
        mask,
        Some((&mut d_logits, cfg.alpha)),
    )?;
    let cqt_loss =
        cqt_mse_loss_with_grads(&out.cqt_pred, cqt, mask, Some((&mut d_cqt, 1.0)))?;
    let breakdown = LossBreakdown {
        rvq,
        cqt: cqt_loss,
        total: cfg.alpha * rvq + cqt_loss,
        masked_frame_count,
    };
    Ok((breakdown, LossGrads { d_logits, d_cqt }))
}
