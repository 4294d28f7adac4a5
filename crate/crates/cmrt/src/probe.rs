//! Probing-based evaluation of frozen encoders.
//!
//! The backbone never trains here: clips are pushed through a mask-free
//! forward pass, per-frame hidden states of a chosen transformer block are
//! averaged over time, and a shallow one-hidden-layer perceptron is fit on
//! those fixed vectors with per-tag binary cross-entropy. Long recordings are
//! scored in non-overlapping windows whose sigmoid outputs are averaged.
//! Ranking quality is measured with exact ROC-AUC (rank-sum with midrank
//! ties) and definitional average precision, macro-averaged over tags that
//! have both classes present.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;

use crate::dsp::{crop_segment, AudioBuffer, PadPolicy};
use crate::model::forward::{encoder_forward, feature_extractor_forward};
use crate::model::{MaskSpec, ModelConfig, ModelParams};
use crate::rng::{derive_seed, next_gaussian, rng_from_seed};
use crate::{Error, Result};

/// Which hidden representation feeds the probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLayer {
    /// Output of the final transformer block.
    Last,
    /// Output of block `i` (0-based).
    Index(usize),
    /// Softmax-weighted sum over all blocks, with the weights trained
    /// jointly with the probe.
    LearnedWeighted,
}

/// Probe architecture and training scalars.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ProbeConfig {
    pub hidden_dim: usize,
    pub feature_layer: FeatureLayer,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Length of the non-overlapping scoring windows, seconds.
    pub window_seconds: f64,
    /// Truncate recordings to this many seconds before windowing, if set.
    pub max_duration_seconds: Option<f64>,
    pub rng_seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> ProbeConfig {
        ProbeConfig {
            hidden_dim: 512,
            feature_layer: FeatureLayer::Last,
            epochs: 40,
            lr: 1e-3,
            batch: 16,
            window_seconds: 30.0,
            max_duration_seconds: None,
            rng_seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::InvalidInput("probe hidden_dim must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::InvalidInput("probe batch must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidInput("probe lr must be positive".into()));
        }
        if !(self.window_seconds > 0.0) {
            return Err(Error::InvalidInput("window_seconds must be positive".into()));
        }
        if let Some(d) = self.max_duration_seconds {
            if !(d > 0.0) {
                return Err(Error::InvalidInput("max_duration_seconds must be positive".into()));
            }
        }
        Ok(())
    }
}

/// A clip identifier plus its binary tag vector.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TaggedClip {
    pub audio_ref: String,
    pub labels: Vec<bool>,
}

/// Per-layer time-averaged hidden vectors for one clip, in block order.
#[derive(Debug, Clone)]
pub struct ClipFeatures {
    pub layers: Vec<Vec<f64>>,
}

impl ClipFeatures {
    pub fn dim(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }
}

/// Mask-free forward pass; every transformer block's output is averaged over
/// frames, giving one `d_model` vector per block.
pub fn extract_clip_features(
    params: &ModelParams,
    config: &ModelConfig,
    buf: &AudioBuffer,
) -> Result<ClipFeatures> {
    let feats = feature_extractor_forward(params, config, buf)?;
    let frames = config.frames_for(buf.len());
    let out = encoder_forward(params, config, &feats, &MaskSpec::empty(frames))?;
    let d = config.d_model;
    let layers = out
        .hidden_states
        .iter()
        .map(|h| {
            let mut avg = vec![0.0f64; d];
            for t in 0..frames {
                for (a, x) in avg.iter_mut().zip(&h[t * d..(t + 1) * d]) {
                    *a += x;
                }
            }
            avg.iter_mut().for_each(|a| *a /= frames as f64);
            avg
        })
        .collect();
    Ok(ClipFeatures { layers })
}

/// The layer view the probe consumes: one vector for `last`/`index`, the
/// full stack for `learned_weighted`.
fn select_layers(features: &ClipFeatures, layer: FeatureLayer) -> Result<Vec<Vec<f64>>> {
    match layer {
        FeatureLayer::Last => Ok(vec![features
            .layers
            .last()
            .ok_or_else(|| Error::InvalidInput("clip features hold no layers".into()))?
            .clone()]),
        FeatureLayer::Index(i) => features.layers.get(i).map(|v| vec![v.clone()]).ok_or_else(|| {
            Error::InvalidInput(format!(
                "feature layer {i} out of range for {} blocks",
                features.layers.len()
            ))
        }),
        FeatureLayer::LearnedWeighted => Ok(features.layers.clone()),
    }
}

/// One-hidden-layer multi-label perceptron with optional learned layer
/// weighting in front.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProbeParams {
    /// Pre-softmax mixing weights over input layers (length = layer count).
    pub layer_logits: Vec<f64>,
    /// Hidden weights, row-major [hidden × in_dim].
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Output weights, row-major [tags × hidden].
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub n_tags: usize,
    pub feature_layer: FeatureLayer,
}

impl ProbeParams {
    fn init(
        in_dim: usize,
        hidden_dim: usize,
        n_tags: usize,
        n_layers: usize,
        feature_layer: FeatureLayer,
        seed: u64,
    ) -> ProbeParams {
        let mut rng = rng_from_seed(seed);
        let s1 = 1.0 / (in_dim as f64).sqrt();
        let w1 = (0..hidden_dim * in_dim).map(|_| s1 * next_gaussian(&mut rng)).collect();
        let s2 = 1.0 / (hidden_dim as f64).sqrt();
        let w2 = (0..n_tags * hidden_dim).map(|_| s2 * next_gaussian(&mut rng)).collect();
        ProbeParams {
            layer_logits: vec![0.0; n_layers],
            w1,
            b1: vec![0.0; hidden_dim],
            w2,
            b2: vec![0.0; n_tags],
            in_dim,
            hidden_dim,
            n_tags,
            feature_layer,
        }
    }

    fn layer_weights(&self) -> Vec<f64> {
        let max = self.layer_logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.layer_logits.iter().map(|&a| (a - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    /// Per-tag logits for one clip's selected layer stack.
    pub fn logits(&self, layers: &[Vec<f64>]) -> Result<Vec<f64>> {
        if layers.len() != self.layer_logits.len() {
            return Err(Error::ShapeMismatch(format!(
                "probe expects {} feature layers, got {}",
                self.layer_logits.len(),
                layers.len()
            )));
        }
        for l in layers {
            if l.len() != self.in_dim {
                return Err(Error::ShapeMismatch(format!(
                    "probe expects {}-dim features, got {}",
                    self.in_dim,
                    l.len()
                )));
            }
        }
        let weights = self.layer_weights();
        let mut z = vec![0.0f64; self.in_dim];
        for (w, layer) in weights.iter().zip(layers) {
            for (zi, xi) in z.iter_mut().zip(layer) {
                *zi += w * xi;
            }
        }
        let mut hidden = vec![0.0f64; self.hidden_dim];
        for (h, slot) in hidden.iter_mut().enumerate() {
            let row = &self.w1[h * self.in_dim..(h + 1) * self.in_dim];
            let pre: f64 = self.b1[h] + row.iter().zip(&z).map(|(w, x)| w * x).sum::<f64>();
            *slot = pre.max(0.0);
        }
        let mut out = vec![0.0f64; self.n_tags];
        for (t, slot) in out.iter_mut().enumerate() {
            let row = &self.w2[t * self.hidden_dim..(t + 1) * self.hidden_dim];
            *slot = self.b2[t] + row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>();
        }
        Ok(out)
    }

    /// Sigmoid scores in [0, 1], one per tag.
    pub fn scores(&self, layers: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.logits(layers)?.iter().map(|&l| sigmoid(l)).collect())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fit the probe on fixed per-clip features with per-tag binary
/// cross-entropy, plain SGD with the configured learning rate, and seeded
/// shuffling. Zero epochs returns the freshly initialized probe.
pub fn train_probe(
    features: &[ClipFeatures],
    labels: &[Vec<bool>],
    cfg: &ProbeConfig,
) -> Result<ProbeParams> {
    cfg.validate()?;
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "need matching nonempty features/labels, got {} vs {}",
            features.len(),
            labels.len()
        )));
    }
    let n_tags = labels[0].len();
    if n_tags == 0 || labels.iter().any(|l| l.len() != n_tags) {
        return Err(Error::InvalidInput("inconsistent label vector lengths".into()));
    }
    if !labels.iter().flatten().any(|&b| b) {
        return Err(Error::InvalidInput(
            "degenerate training set: no positive label for any tag".into(),
        ));
    }
    let stacks: Vec<Vec<Vec<f64>>> =
        features.iter().map(|f| select_layers(f, cfg.feature_layer)).collect::<Result<_>>()?;
    let in_dim = stacks[0][0].len();
    let n_layers = stacks[0].len();
    if stacks.iter().any(|s| s.len() != n_layers || s.iter().any(|l| l.len() != in_dim)) {
        return Err(Error::ShapeMismatch("clip features have inconsistent shapes".into()));
    }

    let mut probe = ProbeParams::init(
        in_dim,
        cfg.hidden_dim,
        n_tags,
        n_layers,
        cfg.feature_layer,
        derive_seed(cfg.rng_seed, &[0x9B0E]),
    );
    let mut order: Vec<usize> = (0..stacks.len()).collect();
    let mut shuffle_rng = rng_from_seed(derive_seed(cfg.rng_seed, &[0x5FFE]));

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch) {
            step_probe(&mut probe, &stacks, labels, chunk, cfg.lr)?;
        }
    }
    Ok(probe)
}

/// One SGD step on a mini-batch: forward, mean BCE-with-logits over
/// batch × tags, manual backward.
fn step_probe(
    probe: &mut ProbeParams,
    stacks: &[Vec<Vec<f64>>],
    labels: &[Vec<bool>],
    batch: &[usize],
    lr: f64,
) -> Result<()> {
    let (in_dim, hidden_dim, n_tags) = (probe.in_dim, probe.hidden_dim, probe.n_tags);
    let n_layers = probe.layer_logits.len();
    let mut g_w1 = vec![0.0f64; probe.w1.len()];
    let mut g_b1 = vec![0.0f64; hidden_dim];
    let mut g_w2 = vec![0.0f64; probe.w2.len()];
    let mut g_b2 = vec![0.0f64; n_tags];
    let mut g_alpha = vec![0.0f64; n_layers];
    let weights = probe.layer_weights();
    let scale = 1.0 / (batch.len() * n_tags) as f64;

    for &idx in batch {
        let layers = &stacks[idx];
        let mut z = vec![0.0f64; in_dim];
        for (w, layer) in weights.iter().zip(layers) {
            for (zi, xi) in z.iter_mut().zip(layer) {
                *zi += w * xi;
            }
        }
        let mut pre = vec![0.0f64; hidden_dim];
        let mut hidden = vec![0.0f64; hidden_dim];
        for h in 0..hidden_dim {
            let row = &probe.w1[h * in_dim..(h + 1) * in_dim];
            pre[h] = probe.b1[h] + row.iter().zip(&z).map(|(w, x)| w * x).sum::<f64>();
            hidden[h] = pre[h].max(0.0);
        }
        // d(BCE)/d(logit) = sigmoid(logit) − label, averaged over batch×tags.
        let mut d_hidden = vec![0.0f64; hidden_dim];
        for t in 0..n_tags {
            let row = &probe.w2[t * hidden_dim..(t + 1) * hidden_dim];
            let logit =
                probe.b2[t] + row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>();
            let d = (sigmoid(logit) - if labels[idx][t] { 1.0 } else { 0.0 }) * scale;
            g_b2[t] += d;
            for h in 0..hidden_dim {
                g_w2[t * hidden_dim + h] += d * hidden[h];
                d_hidden[h] += d * row[h];
            }
        }
        let mut d_z = vec![0.0f64; in_dim];
        for h in 0..hidden_dim {
            if pre[h] <= 0.0 {
                continue;
            }
            g_b1[h] += d_hidden[h];
            let row = &probe.w1[h * in_dim..(h + 1) * in_dim];
            for i in 0..in_dim {
                g_w1[h * in_dim + i] += d_hidden[h] * z[i];
                d_z[i] += d_hidden[h] * row[i];
            }
        }
        if n_layers > 1 {
            // Softmax-weighted sum: d_alpha_l = w_l·(g_l − Σ_m w_m·g_m) with
            // g_l = d_z·layer_l.
            let dots: Vec<f64> = layers
                .iter()
                .map(|l| l.iter().zip(&d_z).map(|(x, d)| x * d).sum::<f64>())
                .collect();
            let mixed: f64 = weights.iter().zip(&dots).map(|(w, g)| w * g).sum();
            for l in 0..n_layers {
                g_alpha[l] += weights[l] * (dots[l] - mixed);
            }
        }
    }

    for (p, g) in probe.w1.iter_mut().zip(&g_w1) {
        *p -= lr * g;
    }
    for (p, g) in probe.b1.iter_mut().zip(&g_b1) {
        *p -= lr * g;
    }
    for (p, g) in probe.w2.iter_mut().zip(&g_w2) {
        *p -= lr * g;
    }
    for (p, g) in probe.b2.iter_mut().zip(&g_b2) {
        *p -= lr * g;
    }
    for (p, g) in probe.layer_logits.iter_mut().zip(&g_alpha) {
        *p -= lr * g;
    }
    Ok(())
}

/// Score a recording of any length: truncate to `max_duration_seconds` if
/// set, split into non-overlapping `window_seconds` windows (the final short
/// window zero-padded), score each window, and average the sigmoid outputs.
pub fn predict_recording(
    params: &ModelParams,
    config: &ModelConfig,
    probe: &ProbeParams,
    buf: &AudioBuffer,
    cfg: &ProbeConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if buf.is_empty() {
        return Err(Error::InvalidInput("predict_recording needs a nonempty buffer".into()));
    }
    let sr = config.sample_rate as f64;
    let cut = match cfg.max_duration_seconds {
        Some(d) => {
            let n = ((d * sr).round() as usize).min(buf.len()).max(1);
            AudioBuffer::new(buf.samples[..n].to_vec(), buf.sample_rate)?
        }
        None => buf.clone(),
    };
    let win = (cfg.window_seconds * sr).round() as usize;
    if win == 0 {
        return Err(Error::InvalidInput("window is shorter than one sample".into()));
    }
    let n_windows = cut.len().div_ceil(win);
    let mut sums = vec![0.0f64; probe.n_tags];
    for w in 0..n_windows {
        let start = (w * win) as f64 / sr;
        let window = crop_segment(&cut, start, cfg.window_seconds, PadPolicy::ZeroPad)?;
        let features = extract_clip_features(params, config, &window)?;
        let scores = probe.scores(&select_layers(&features, probe.feature_layer)?)?;
        for (s, x) in sums.iter_mut().zip(scores) {
            *s += x;
        }
    }
    sums.iter_mut().for_each(|s| *s /= n_windows as f64);
    Ok(sums)
}

/// Exact ROC-AUC by rank statistics: the probability that a uniformly random
/// positive outranks a uniformly random negative, ties counting one half.
/// `None` when either class is missing.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels must align");
    let p = labels.iter().filter(|&&l| l).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return None;
    }
    // Midranks: ties share the average of the ranks they straddle.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let p_f = p as f64;
    Some((rank_sum_pos - p_f * (p_f + 1.0) / 2.0) / (p_f * n as f64))
}

/// Definitional average precision: mean, over positives in descending score
/// order (ties broken by original index), of the precision at each
/// positive's rank. `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels must align");
    if !labels.iter().any(|&l| l) {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0f64;
    for (rank0, &idx) in order.iter().enumerate() {
        if labels[idx] {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Some(sum / hits as f64)
}

/// Per-tag ranking quality on a test split.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TagMetrics {
    pub tag: String,
    pub positives: usize,
    pub negatives: usize,
    pub roc_auc: Option<f64>,
    pub ap: Option<f64>,
}

/// Macro metrics over the tags with both classes present, plus the full
/// per-tag breakdown.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricsReport {
    pub roc_auc_macro: f64,
    pub ap_macro: f64,
    pub per_tag: Vec<TagMetrics>,
}

impl MetricsReport {
    /// CSV: one row per tag plus a trailing macro row.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or(String::from(""), |x| format!("{x:.6}"));
        let mut out = String::from("tag,positives,negatives,roc_auc,ap\n");
        for t in &self.per_tag {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                t.tag,
                t.positives,
                t.negatives,
                cell(t.roc_auc),
                cell(t.ap)
            ));
        }
        out.push_str(&format!("macro,,,{:.6},{:.6}\n", self.roc_auc_macro, self.ap_macro));
        out
    }
}

/// Score matrix → per-tag and macro metrics. `scores[i][t]` is clip `i`'s
/// score for tag `t`; tags with a single class are reported but excluded
/// from the macros.
pub fn metrics_report(
    tag_names: &[String],
    scores: &[Vec<f64>],
    labels: &[Vec<bool>],
) -> Result<MetricsReport> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::InvalidInput("need matching nonempty scores and labels".into()));
    }
    let n_tags = tag_names.len();
    if scores.iter().any(|s| s.len() != n_tags) || labels.iter().any(|l| l.len() != n_tags) {
        return Err(Error::ShapeMismatch("score/label width differs from tag count".into()));
    }
    let mut per_tag = Vec::with_capacity(n_tags);
    let mut roc_sum = 0.0;
    let mut ap_sum = 0.0;
    let mut counted = 0usize;
    for t in 0..n_tags {
        let s: Vec<f64> = scores.iter().map(|row| row[t]).collect();
        let l: Vec<bool> = labels.iter().map(|row| row[t]).collect();
        let positives = l.iter().filter(|&&b| b).count();
        let negatives = l.len() - positives;
        let both = positives > 0 && negatives > 0;
        let roc = if both { roc_auc(&s, &l) } else { None };
        let ap = if both { average_precision(&s, &l) } else { None };
        if let (Some(r), Some(a)) = (roc, ap) {
            roc_sum += r;
            ap_sum += a;
            counted += 1;
        }
        per_tag.push(TagMetrics { tag: tag_names[t].clone(), positives, negatives, roc_auc: roc, ap });
    }
    if counted == 0 {
        return Err(Error::InvalidInput(
            "no tag has both a positive and a negative test clip".into(),
        ));
    }
    Ok(MetricsReport {
        roc_auc_macro: roc_sum / counted as f64,
        ap_macro: ap_sum / counted as f64,
        per_tag,
    })
}

/// A multi-label task: named tags and clips split into train and test.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub tag_names: Vec<String>,
    pub train: Vec<(TaggedClip, AudioBuffer)>,
    pub test: Vec<(TaggedClip, AudioBuffer)>,
}

impl TaskDataset {
    fn validate(&self) -> Result<()> {
        let n = self.tag_names.len();
        if n == 0 {
            return Err(Error::InvalidInput("task has no tags".into()));
        }
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::InvalidInput("task needs nonempty train and test splits".into()));
        }
        for (clip, _) in self.train.iter().chain(&self.test) {
            if clip.labels.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "clip {:?} has {} labels for {} tags",
                    clip.audio_ref,
                    clip.labels.len(),
                    n
                )));
            }
        }
        let train_refs: BTreeSet<&str> =
            self.train.iter().map(|(c, _)| c.audio_ref.as_str()).collect();
        for (c, _) in &self.test {
            if train_refs.contains(c.audio_ref.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "clip {:?} appears in both train and test splits",
                    c.audio_ref
                )));
            }
        }
        Ok(())
    }
}

/// Full protocol: extract frozen features for the train split (after the
/// optional duration cut), fit the probe, score the test split window-wise,
/// and report per-tag and macro metrics.
pub fn evaluate_model(
    params: &ModelParams,
    config: &ModelConfig,
    dataset: &TaskDataset,
    cfg: &ProbeConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    dataset.validate()?;
    let sr = config.sample_rate as f64;
    let mut features = Vec::with_capacity(dataset.train.len());
    for (_, buf) in &dataset.train {
        let cut = match cfg.max_duration_seconds {
            Some(d) => {
                let n = ((d * sr).round() as usize).min(buf.len()).max(1);
                AudioBuffer::new(buf.samples[..n].to_vec(), buf.sample_rate)?
            }
            None => buf.clone(),
        };
        features.push(extract_clip_features(params, config, &cut)?);
    }
    let labels: Vec<Vec<bool>> = dataset.train.iter().map(|(c, _)| c.labels.clone()).collect();
    let probe = train_probe(&features, &labels, cfg)?;

    let mut scores = Vec::with_capacity(dataset.test.len());
    for (_, buf) in &dataset.test {
        scores.push(predict_recording(params, config, &probe, buf, cfg)?);
    }
    let test_labels: Vec<Vec<bool>> =
        dataset.test.iter().map(|(c, _)| c.labels.clone()).collect();
    metrics_report(&dataset.tag_names, &scores, &test_labels)
}

/// Mean and standard deviation of the macro metrics across probe seeds.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub roc_auc_mean: f64,
    pub roc_auc_std: f64,
    pub ap_mean: f64,
    pub ap_std: f64,
}

/// Run `evaluate_model` once per seed (seed only affects the probe) and
/// summarize with mean and sample standard deviation.
pub fn evaluate_across_seeds(
    params: &ModelParams,
    config: &ModelConfig,
    dataset: &TaskDataset,
    cfg: &ProbeConfig,
    seeds: &[u64],
) -> Result<(SeedSummary, Vec<MetricsReport>)> {
    if seeds.is_empty() {
        return Err(Error::InvalidInput("need at least one probe seed".into()));
    }
    let mut reports = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let seeded = ProbeConfig { rng_seed: seed, ..cfg.clone() };
        reports.push(evaluate_model(params, config, dataset, &seeded)?);
    }
    let stat = |xs: Vec<f64>| -> (f64, f64) {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = if xs.len() < 2 {
            0.0
        } else {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
        };
        (mean, var.sqrt())
    };
    let (roc_auc_mean, roc_auc_std) =
        stat(reports.iter().map(|r| r.roc_auc_macro).collect());
    let (ap_mean, ap_std) = stat(reports.iter().map(|r| r.ap_macro).collect());
    Ok((
        SeedSummary { seeds: seeds.to_vec(), roc_auc_mean, roc_auc_std, ap_mean, ap_std },
        reports,
    ))
}
