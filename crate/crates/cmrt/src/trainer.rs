//! Two-stage continual pre-training engine.
//!
//! A stage is a fixed number of optimizer steps over a deterministic clip
//! schedule. Each step accumulates gradients over `accum_steps` micro-batches
//! of `batch_clips / accum_steps` cropped (and optionally mixed) clips,
//! averages them, clips the global norm, and applies one AdamW update with a
//! warmup-then-cosine learning rate. Stage 1 conventionally trains only the
//! convolutional extractor and the codeword embeddings; stage 2 unfreezes
//! everything and re-warms the learning rate from a lower maximum. Optimizer
//! moments are created fresh at the start of every stage.
//!
//! All randomness (clip schedule, crop offsets, mixup, span masks) is derived
//! from the stage seed, so a stage reruns bit-identically.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::{self, Checkpoint};
use crate::dsp::cqt::{CqtConfig, CqtPlan};
use crate::dsp::{crop_segment, mixup_batch, AudioBuffer, PadPolicy};
use crate::losses::{combined_loss, combined_loss_with_grads, LossConfig};
use crate::model::backward::full_backward;
use crate::model::forward::full_forward_cached;
use crate::model::{validate_params, ModelConfig, ModelParams, ParamGroup};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::TensorMap;
use crate::tokenizer::{frame_features, tokenize, RvqCodec};
use crate::{Error, Result};

/// Seed-derivation tags so each consumer of the stage seed gets an
/// independent stream.
const TAG_SCHEDULE: u64 = 0x11D5;
const TAG_CROP: u64 = 0xC401;
const TAG_MIXUP: u64 = 0x313F;
const TAG_FORWARD: u64 = 0xF0D0;
const TAG_EVAL: u64 = 0xE7A1;

/// Hyper-parameters for one training stage.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainStageConfig {
    /// Number of optimizer steps.
    pub steps: usize,
    /// Fraction of `steps` spent in linear warmup (0, 1).
    pub warmup_fraction: f64,
    /// Peak learning rate reached at the end of warmup.
    pub lr_max: f64,
    /// Floor reached by the cosine decay at the final step.
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Clips per effective batch (one optimizer step).
    pub batch_clips: usize,
    /// Micro-batches per optimizer step; must divide `batch_clips`.
    pub accum_steps: usize,
    /// Parameter groups that receive updates; everything else is frozen.
    pub trainable_groups: BTreeSet<ParamGroup>,
    /// Fraction of the schedule drawn from the replay corpus.
    pub replay_fraction: f64,
    /// Per-clip probability of in-batch mixup.
    pub mixup_prob: f64,
    pub rng_seed: u64,
}

impl TrainStageConfig {
    /// Stage-1 stabilization defaults: extractor + codeword embeddings only,
    /// 10% warmup, 5e-4 → 5e-5, 20% replay.
    pub fn stage1_defaults() -> TrainStageConfig {
        TrainStageConfig {
            steps: 2250,
            warmup_fraction: 0.10,
            lr_max: 5e-4,
            lr_min: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
            weight_decay: 0.01,
            clip_norm: 1.0,
            batch_clips: 32,
            accum_steps: 8,
            trainable_groups: [ParamGroup::Conv, ParamGroup::CodewordEmb].into_iter().collect(),
            replay_fraction: 0.2,
            mixup_prob: 0.0,
            rng_seed: 0,
        }
    }

    /// Stage-2 full-adaptation defaults: all groups trainable, 1% warmup,
    /// re-warmed 5e-5 → 5e-6, β2 lowered to 0.95.
    pub fn stage2_defaults() -> TrainStageConfig {
        TrainStageConfig {
            steps: 14625,
            warmup_fraction: 0.01,
            lr_max: 5e-5,
            lr_min: 5e-6,
            beta2: 0.95,
            trainable_groups: ParamGroup::ALL.into_iter().collect(),
            replay_fraction: 0.0,
            ..TrainStageConfig::stage1_defaults()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidInput("steps must be >= 1".into()));
        }
        if !(self.warmup_fraction >= 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::InvalidInput("warmup_fraction must lie in [0, 1)".into()));
        }
        if !(self.lr_max > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::InvalidInput("need 0 < lr_min <= lr_max".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidInput("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidInput("eps must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidInput("weight_decay must be >= 0".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidInput("clip_norm must be positive".into()));
        }
        if self.batch_clips == 0 || self.accum_steps == 0 {
            return Err(Error::InvalidInput("batch_clips and accum_steps must be >= 1".into()));
        }
        if !self.batch_clips.is_multiple_of(self.accum_steps) {
            return Err(Error::InvalidInput(format!(
                "accum_steps {} must divide batch_clips {}",
                self.accum_steps, self.batch_clips
            )));
        }
        if !(0.0..=1.0).contains(&self.replay_fraction) {
            return Err(Error::InvalidInput("replay_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.mixup_prob) {
            return Err(Error::InvalidInput("mixup_prob must lie in [0, 1]".into()));
        }
        if self.trainable_groups.is_empty() {
            return Err(Error::InvalidInput("at least one trainable group is required".into()));
        }
        Ok(())
    }

    /// Number of warmup steps, `round(warmup_fraction * steps)`.
    /// Zero warmup with `lr_max == lr_min` gives a constant learning rate,
    /// which is how the no-re-warm ablation is expressed.
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.steps as f64).round() as usize
    }

    /// Clips per micro-batch.
    pub fn micro_clips(&self) -> usize {
        self.batch_clips / self.accum_steps
    }
}

/// Where training clips come from and in what proportion.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DataMixSpec {
    /// Weighted non-replay sources.
    pub sources: Vec<(String, f64)>,
    /// Corpus that fills the replay slots, if any.
    pub replay_source: Option<String>,
    /// Fraction of the schedule reserved for replay.
    pub replay_fraction: f64,
}

impl DataMixSpec {
    /// A single-source mix without replay.
    pub fn single(corpus_id: &str) -> DataMixSpec {
        DataMixSpec {
            sources: vec![(corpus_id.to_string(), 1.0)],
            replay_source: None,
            replay_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.replay_fraction) {
            return Err(Error::InvalidInput("replay_fraction must lie in [0, 1]".into()));
        }
        if self.replay_fraction > 0.0 && self.replay_source.is_none() {
            return Err(Error::InvalidInput(
                "replay_fraction > 0 requires a replay_source".into(),
            ));
        }
        for (id, w) in &self.sources {
            if !(*w > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "source {id:?} has non-positive weight {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Learning rate at `step` (0-based): linear warmup to `lr_max` over
/// `round(warmup_fraction * steps)` steps, then cosine decay so that the
/// final step lands exactly on `lr_min`.
pub fn lr_at_step(step: usize, cfg: &TrainStageConfig) -> Result<f64> {
    if step >= cfg.steps {
        return Err(Error::InvalidInput(format!(
            "step {step} out of range for a {}-step stage",
            cfg.steps
        )));
    }
    let warmup = cfg.warmup_steps();
    if step < warmup {
        return Ok(cfg.lr_max * (step + 1) as f64 / warmup as f64);
    }
    // The decay phase covers steps warmup..steps-1; normalizing by the last
    // decay index pins lr(steps-1) to lr_min exactly.
    let span = cfg.steps - warmup - 1;
    if span == 0 {
        return Ok(cfg.lr_min);
    }
    let progress = (step - warmup) as f64 / span as f64;
    Ok(cfg.lr_min
        + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Deterministic shuffled schedule of `(corpus_id, occurrence_index)` pairs.
///
/// The replay corpus occupies `round(replay_fraction * total_clips)` slots;
/// the remainder is split across the weighted sources by largest-remainder
/// apportionment (exact to ±1 clip). The occurrence index counts, per corpus,
/// how many earlier slots the schedule assigned to it; consumers map it onto
/// concrete clips (typically modulo the corpus size).
pub fn build_training_mix(
    spec: &DataMixSpec,
    total_clips: usize,
    rng_seed: u64,
) -> Result<Vec<(String, usize)>> {
    spec.validate()?;
    let replay_slots = (spec.replay_fraction * total_clips as f64).round() as usize;
    let rest = total_clips - replay_slots.min(total_clips);
    if rest > 0 && spec.sources.is_empty() {
        return Err(Error::InvalidInput(
            "non-replay slots requested but the mix has no sources".into(),
        ));
    }

    let mut ids: Vec<&str> = Vec::with_capacity(total_clips);
    if replay_slots > 0 {
        let replay = spec.replay_source.as_deref().expect("validated above");
        ids.extend(std::iter::repeat_n(replay, replay_slots));
    }

    if rest > 0 {
        // Largest-remainder apportionment of `rest` slots over the weights.
        let total_w: f64 = spec.sources.iter().map(|(_, w)| w).sum();
        let quotas: Vec<f64> =
            spec.sources.iter().map(|(_, w)| w / total_w * rest as f64).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = quotas[a] - quotas[a].floor();
            let fb = quotas[b] - quotas[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for i in 0..rest - assigned {
            counts[order[i % order.len()]] += 1;
        }
        for (idx, count) in counts.iter().enumerate() {
            ids.extend(std::iter::repeat_n(spec.sources[idx].0.as_str(), *count));
        }
    }

    let mut rng = rng_from_seed(rng_seed);
    ids.shuffle(&mut rng);

    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    Ok(ids
        .into_iter()
        .map(|id| {
            let occ = seen.entry(id).or_insert(0);
            let pair = (id.to_string(), *occ);
            *occ += 1;
            pair
        })
        .collect())
}

/// Scale all gradients by `clip_norm / norm` when the joint L2 norm exceeds
/// `clip_norm`; returns the pre-clip norm. Non-finite gradients are rejected
/// with the offending tensor named.
pub fn clip_gradients(mut grads: TensorMap, clip_norm: f64) -> Result<(TensorMap, f64)> {
    if !(clip_norm > 0.0) {
        return Err(Error::InvalidInput("clip_norm must be positive".into()));
    }
    let mut sq_sum = 0.0;
    for (name, tensor) in grads.iter() {
        for &g in tensor.as_f64()? {
            if !g.is_finite() {
                return Err(Error::Training(format!("non-finite gradient in tensor {name:?}")));
            }
            sq_sum += g * g;
        }
    }
    let norm = sq_sum.sqrt();
    if norm > clip_norm {
        let scale = clip_norm / norm;
        for (_, tensor) in grads.iter_mut() {
            for g in tensor.as_f64_mut()? {
                *g *= scale;
            }
        }
    }
    Ok((grads, norm))
}

/// AdamW moments for the trainable subset of the parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub first_moment: TensorMap,
    pub second_moment: TensorMap,
    pub step_count: u64,
}

impl OptimizerState {
    /// Fresh zero moments covering exactly the tensors in `trainable` groups.
    pub fn new(params: &ModelParams, trainable: &BTreeSet<ParamGroup>) -> Result<OptimizerState> {
        let mut first = TensorMap::new();
        let mut second = TensorMap::new();
        for (name, tensor) in params.iter() {
            if trainable.contains(&ParamGroup::of(name)) {
                let zeros = crate::tensor::Tensor::zeros_f64(tensor.shape.clone());
                first.insert(name, zeros.clone())?;
                second.insert(name, zeros)?;
            }
        }
        Ok(OptimizerState { first_moment: first, second_moment: second, step_count: 0 })
    }
}

/// One decoupled-weight-decay adaptive-moment update. Only tensors whose
/// group is in `cfg.trainable_groups` change; everything else stays bitwise
/// identical. `grads` must be congruent with `params`.
pub fn optimizer_step(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    grads: &TensorMap,
    lr: f64,
    cfg: &TrainStageConfig,
) -> Result<()> {
    if !params.congruent(grads) {
        return Err(Error::ShapeMismatch(
            "gradient map is not congruent with the parameter map".into(),
        ));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let names: Vec<String> = state.first_moment.names().map(str::to_string).collect();
    for name in &names {
        let g = grads.f64_slice(name)?;
        let m = state.first_moment.get_mut(name)?.as_f64_mut()?;
        let v = state.second_moment.get_mut(name)?.as_f64_mut()?;
        let p = params.get_mut(name)?.as_f64_mut()?;
        if g.len() != p.len() {
            return Err(Error::ShapeMismatch(format!("tensor {name:?} length changed")));
        }
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
        }
    }
    Ok(())
}

/// A named pile of clips, all at the model sample rate.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub id: String,
    pub clips: Vec<AudioBuffer>,
}

/// Frozen target generators shared by every stage: the quantizing codec and
/// the constant-Q settings.
#[derive(Debug, Clone)]
pub struct Teachers {
    pub codec: RvqCodec,
    pub cqt: CqtConfig,
}

/// Stage knobs that are not optimization hyper-parameters.
#[derive(Debug, Clone)]
pub struct RunStageOptions {
    pub loss: LossConfig,
    /// Crop length per scheduled clip, seconds.
    pub crop_seconds: f64,
    /// Save an intermediate checkpoint every N steps into `checkpoint_dir`.
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Evaluate mean held-out loss every N steps (fixed masks, no updates).
    pub eval_every: Option<usize>,
    pub eval_clips: Vec<AudioBuffer>,
}

impl Default for RunStageOptions {
    fn default() -> RunStageOptions {
        RunStageOptions {
            loss: LossConfig::default(),
            crop_seconds: 5.0,
            checkpoint_every: None,
            checkpoint_dir: None,
            eval_every: None,
            eval_clips: Vec::new(),
        }
    }
}

/// One optimizer step's log line.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub lr: f64,
    pub rvq: f64,
    pub cqt: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub masked_frames: usize,
}

/// Render log rows as CSV with a fixed header.
pub fn log_to_csv(rows: &[TrainLogRow]) -> String {
    let mut out = String::from("step,lr,rvq,cqt,total,grad_norm,masked_frames\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{}\n",
            r.step, r.lr, r.rvq, r.cqt, r.total, r.grad_norm, r.masked_frames
        ));
    }
    out
}

/// Everything a stage produces.
#[derive(Debug, Clone)]
pub struct StageResult {
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogRow>,
    /// `(step, mean held-out loss)` samples, if evaluation was enabled.
    pub eval_history: Vec<(usize, f64)>,
}

fn corpus_index(corpora: &[Corpus]) -> Result<BTreeMap<&str, &Corpus>> {
    let mut map = BTreeMap::new();
    for c in corpora {
        if c.clips.is_empty() {
            return Err(Error::InvalidInput(format!("corpus {:?} has no clips", c.id)));
        }
        if map.insert(c.id.as_str(), c).is_some() {
            return Err(Error::InvalidInput(format!("duplicate corpus id {:?}", c.id)));
        }
    }
    Ok(map)
}

/// Mean combined loss over `clips` with per-clip fixed mask seeds (clip `i`
/// always draws the same mask), so the number is comparable across models
/// and across evaluation points. No parameters are updated.
pub fn heldout_loss(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    teachers: &Teachers,
    loss_cfg: &LossConfig,
    clips: &[AudioBuffer],
    seed: u64,
) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::InvalidInput("heldout_loss needs at least one clip".into()));
    }
    let plan = CqtPlan::new(model_cfg.sample_rate, &teachers.cqt)?;
    let mut sum = 0.0;
    for (i, clip) in clips.iter().enumerate() {
        let feats = frame_features(clip, teachers.codec.d())?;
        let tokens = tokenize(&teachers.codec, &feats)?;
        let cqt = plan.compute(clip)?;
        let (out, mask, _) =
            full_forward_cached(params, model_cfg, clip, derive_seed(seed, &[i as u64]))?;
        sum += combined_loss(&out, &tokens, &cqt, &mask, loss_cfg)?.total;
    }
    Ok(sum / clips.len() as f64)
}

/// Run one training stage from `init`, returning the final checkpoint, the
/// per-step log, and any evaluation history. Deterministic given the configs.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    init: &Checkpoint,
    model_cfg: &ModelConfig,
    stage_cfg: &TrainStageConfig,
    mix: &DataMixSpec,
    corpora: &[Corpus],
    teachers: &Teachers,
    stage_label: &str,
    opts: &RunStageOptions,
) -> Result<StageResult> {
    model_cfg.validate()?;
    stage_cfg.validate()?;
    mix.validate()?;
    if mix.replay_fraction != stage_cfg.replay_fraction {
        return Err(Error::InvalidInput(format!(
            "mix replay_fraction {} disagrees with stage config {}",
            mix.replay_fraction, stage_cfg.replay_fraction
        )));
    }
    if init.config_digest != model_cfg.digest() {
        return Err(Error::DigestMismatch(format!(
            "checkpoint was built for config {} but the stage runs config {}",
            init.config_digest,
            model_cfg.digest()
        )));
    }
    validate_params(&init.params, model_cfg)?;
    if teachers.codec.k() != model_cfg.k || teachers.codec.c() != model_cfg.c {
        return Err(Error::Training(format!(
            "teacher codec is {}x{} codewords but the model predicts {}x{}",
            teachers.codec.k(),
            teachers.codec.c(),
            model_cfg.k,
            model_cfg.c
        )));
    }
    if teachers.cqt.n_bins != model_cfg.cqt_bins {
        return Err(Error::Training(format!(
            "teacher spectrogram has {} bins but the regression head has {}",
            teachers.cqt.n_bins, model_cfg.cqt_bins
        )));
    }
    if teachers.cqt.frame_rate as usize * model_cfg.frame_stride != model_cfg.sample_rate as usize
    {
        return Err(Error::Training(format!(
            "teacher frame rate {} Hz does not match the {}-sample model stride at {} Hz",
            teachers.cqt.frame_rate, model_cfg.frame_stride, model_cfg.sample_rate
        )));
    }
    if !(opts.crop_seconds > 0.0) {
        return Err(Error::InvalidInput("crop_seconds must be positive".into()));
    }
    if stage_cfg.mixup_prob > 0.0 && stage_cfg.micro_clips() < 2 {
        return Err(Error::InvalidInput(
            "mixup needs micro-batches of at least 2 clips".into(),
        ));
    }
    let by_id = corpus_index(corpora)?;
    for c in corpora {
        for clip in &c.clips {
            if clip.sample_rate != model_cfg.sample_rate {
                return Err(Error::InvalidInput(format!(
                    "corpus {:?} contains a {} Hz clip; the model expects {} Hz",
                    c.id, clip.sample_rate, model_cfg.sample_rate
                )));
            }
        }
    }
    let plan = CqtPlan::new(model_cfg.sample_rate, &teachers.cqt)?;

    let seed = stage_cfg.rng_seed;
    let micro_clips = stage_cfg.micro_clips();
    let total_clips = stage_cfg.steps * stage_cfg.accum_steps * micro_clips;
    let schedule = build_training_mix(mix, total_clips, derive_seed(seed, &[TAG_SCHEDULE]))?;

    let mut params = init.params.clone();
    let mut opt = OptimizerState::new(&params, &stage_cfg.trainable_groups)?;
    let mut log = Vec::with_capacity(stage_cfg.steps);
    let mut eval_history = Vec::new();
    let expect_frames = model_cfg.frames_for(
        (opts.crop_seconds * model_cfg.sample_rate as f64).round() as usize,
    );

    for step in 0..stage_cfg.steps {
        let lr = lr_at_step(step, stage_cfg)?;
        let mut grad_sum = params.zeros_like();
        let mut rvq_sum = 0.0;
        let mut cqt_sum = 0.0;
        let mut total_sum = 0.0;
        let mut masked_frames = 0usize;

        for micro in 0..stage_cfg.accum_steps {
            let base = (step * stage_cfg.accum_steps + micro) * micro_clips;
            let mut batch = Vec::with_capacity(micro_clips);
            for slot in 0..micro_clips {
                let (corpus_id, occ) = &schedule[base + slot];
                let corpus = by_id.get(corpus_id.as_str()).ok_or_else(|| {
                    Error::InvalidInput(format!("schedule references unknown corpus {corpus_id:?}"))
                })?;
                let clip = &corpus.clips[occ % corpus.clips.len()];
                let crop_len = opts.crop_seconds.min(clip.duration_seconds());
                let headroom = clip.duration_seconds() - crop_len;
                let mut crop_rng = rng_from_seed(derive_seed(
                    seed,
                    &[TAG_CROP, step as u64, micro as u64, slot as u64],
                ));
                let start = if headroom > 0.0 { crop_rng.gen::<f64>() * headroom } else { 0.0 };
                batch.push(crop_segment(clip, start, opts.crop_seconds, PadPolicy::ZeroPad)?);
            }
            let batch = mixup_batch(
                &batch,
                stage_cfg.mixup_prob,
                None,
                derive_seed(seed, &[TAG_MIXUP, step as u64, micro as u64]),
            )?;

            for (slot, buf) in batch.iter().enumerate() {
                let feats = frame_features(buf, teachers.codec.d())?;
                let tokens = tokenize(&teachers.codec, &feats)?;
                let cqt = plan.compute(buf)?;
                if cqt.frames != expect_frames || tokens.frames != expect_frames {
                    return Err(Error::Training(format!(
                        "teacher/model frame misalignment at step {step}: model expects \
                         {expect_frames} frames, teachers produced {} (tokens) and {} (cqt)",
                        tokens.frames, cqt.frames
                    )));
                }
                let fseed =
                    derive_seed(seed, &[TAG_FORWARD, step as u64, micro as u64, slot as u64]);
                let (out, mask, cache) = full_forward_cached(&params, model_cfg, buf, fseed)?;
                let (breakdown, lgrads) =
                    combined_loss_with_grads(&out, &tokens, &cqt, &mask, &opts.loss)?;
                if !breakdown.total.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss at step {step} (micro-batch {micro}, clip {slot})"
                    )));
                }
                let g = full_backward(
                    &params,
                    model_cfg,
                    &cache,
                    &mask,
                    &lgrads.d_logits,
                    &lgrads.d_cqt,
                )?;
                for (name, tensor) in g.iter() {
                    let acc = grad_sum.get_mut(name)?.as_f64_mut()?;
                    for (a, b) in acc.iter_mut().zip(tensor.as_f64()?) {
                        *a += b;
                    }
                }
                rvq_sum += breakdown.rvq;
                cqt_sum += breakdown.cqt;
                total_sum += breakdown.total;
                masked_frames += breakdown.masked_frame_count;
            }
        }

        // Average over every clip in the effective batch, which is identical
        // to averaging equal-sized micro-batch means.
        let inv = 1.0 / (stage_cfg.accum_steps * micro_clips) as f64;
        for (_, tensor) in grad_sum.iter_mut() {
            for g in tensor.as_f64_mut()? {
                *g *= inv;
            }
        }
        let (clipped, grad_norm) = clip_gradients(grad_sum, stage_cfg.clip_norm)?;
        optimizer_step(&mut params, &mut opt, &clipped, lr, stage_cfg)?;

        let n = (stage_cfg.accum_steps * micro_clips) as f64;
        log.push(TrainLogRow {
            step,
            lr,
            rvq: rvq_sum / n,
            cqt: cqt_sum / n,
            total: total_sum / n,
            grad_norm,
            masked_frames,
        });

        if let Some(every) = opts.eval_every {
            if !opts.eval_clips.is_empty() && (step + 1) % every == 0 {
                let l = heldout_loss(
                    &params,
                    model_cfg,
                    teachers,
                    &opts.loss,
                    &opts.eval_clips,
                    derive_seed(seed, &[TAG_EVAL]),
                )?;
                eval_history.push((step + 1, l));
            }
        }
        if let (Some(every), Some(dir)) = (opts.checkpoint_every, opts.checkpoint_dir.as_ref()) {
            if (step + 1) % every == 0 {
                let ck = finished_checkpoint(init, params.clone(), model_cfg, stage_cfg, stage_label, step + 1);
                checkpoint::save(&ck, &dir.join(format!("{stage_label}_step{:06}.ckpt", step + 1)))?;
            }
        }
    }

    let checkpoint =
        finished_checkpoint(init, params, model_cfg, stage_cfg, stage_label, stage_cfg.steps);
    Ok(StageResult { checkpoint, log, eval_history })
}

fn finished_checkpoint(
    init: &Checkpoint,
    params: ModelParams,
    model_cfg: &ModelConfig,
    stage_cfg: &TrainStageConfig,
    stage_label: &str,
    steps_done: usize,
) -> Checkpoint {
    let mut seeds = init.seed_record.clone();
    seeds.push(stage_cfg.rng_seed);
    let mut ck = Checkpoint::new(
        params,
        model_cfg.digest(),
        init.step + steps_done as u64,
        stage_label,
        seeds,
    );
    ck.meta = init.meta.clone();
    ck.meta.insert(format!("{stage_label}_steps"), steps_done.to_string());
    ck
}

/// The two-stage recipe: a stabilization stage threaded into a full
/// adaptation stage, labelled "stage1" and "stage2".
#[allow(clippy::too_many_arguments)]
pub fn run_two_stage(
    init: &Checkpoint,
    model_cfg: &ModelConfig,
    stage1_cfg: &TrainStageConfig,
    stage2_cfg: &TrainStageConfig,
    stage1_mix: &DataMixSpec,
    stage2_mix: &DataMixSpec,
    corpora: &[Corpus],
    teachers: &Teachers,
    opts: &RunStageOptions,
) -> Result<(StageResult, StageResult)> {
    let s1 = run_stage(init, model_cfg, stage1_cfg, stage1_mix, corpora, teachers, "stage1", opts)?;
    let s2 = run_stage(
        &s1.checkpoint,
        model_cfg,
        stage2_cfg,
        stage2_mix,
        corpora,
        teachers,
        "stage2",
        opts,
    )?;
    Ok((s1, s2))
}
