//! Frozen residual-vector-quantization acoustic teacher.
//!
//! A seeded RVQ codec over spectral frame features stands in for a learned
//! teacher: it maps each 75 Hz frame to K discrete tokens (one per codebook)
//! and never updates after construction. Corpus-level token histograms feed
//! the similarity analysis.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use sha2::{Digest, Sha256};

use crate::dsp::cqt::reflect_index;
use crate::dsp::AudioBuffer;
use crate::error::{Error, Result};
use crate::rng::{next_gaussian, rng_from_seed};
use crate::tensor::{Tensor, TensorMap};

/// Samples between frame centers (75 Hz at 24 kHz).
pub const FEATURE_HOP: usize = 320;
/// Analysis window for the spectral front-end.
const FFT_LEN: usize = 512;
/// Floor added before the log so silence is well-defined.
const LOG_FLOOR: f64 = 1e-10;
/// Seed of the fixed projection matrix used by [`frame_features`].
const PROJECTION_SEED: u64 = 0x5EED_FEA7;

/// Row-major [frames × dim] feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub data: Vec<f64>,
    pub frames: usize,
    pub dim: usize,
}

impl Features {
    pub fn new(data: Vec<f64>, frames: usize, dim: usize) -> Result<Self> {
        if data.len() != frames * dim {
            return Err(Error::ShapeMismatch(format!(
                "feature data length {} != {frames} frames × {dim} dims",
                data.len()
            )));
        }
        Ok(Features { data, frames, dim })
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

/// Per-frame features: Hann-windowed log-magnitude spectrum, standardized
/// across bins and first-differenced along frequency (both steps remove the
/// smooth leakage envelope that every frame shares, so the quantizer sees
/// where the spectral peaks sit rather than a common tilt, independent of
/// gain), then linearly projected to `d` dimensions by a fixed seeded
/// matrix. Frames sit on the same centered hop grid as the CQT and the
/// model's feature extractor, so the frame count is `ceil(len / 320)`.
pub fn frame_features(buf: &AudioBuffer, d: usize) -> Result<Features> {
    if buf.is_empty() {
        return Err(Error::InvalidInput("frame_features: empty audio buffer".into()));
    }
    if d == 0 {
        return Err(Error::InvalidInput("feature dim must be positive".into()));
    }
    let n_bins = FFT_LEN / 2 + 1;
    let n_diff = n_bins - 1;
    // Fixed projection shared by every call; scaled so outputs stay O(1).
    let mut proj_rng = rng_from_seed(PROJECTION_SEED);
    let scale = 1.0 / (n_diff as f64).sqrt();
    let proj: Vec<f64> =
        (0..d * n_diff).map(|_| scale * next_gaussian(&mut proj_rng)).collect();

    let window: Vec<f64> = (0..FFT_LEN)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (FFT_LEN - 1) as f64).cos())
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(FFT_LEN);

    let frames = buf.len().div_ceil(FEATURE_HOP);
    let mut out = vec![0.0f64; frames * d];
    let mut frame = vec![Complex::new(0.0, 0.0); FFT_LEN];
    let half = (FFT_LEN / 2) as isize;
    for t in 0..frames {
        let center = (t * FEATURE_HOP) as isize;
        for (i, slot) in frame.iter_mut().enumerate() {
            let idx = reflect_index(center - half + i as isize, buf.len());
            *slot = Complex::new(buf.samples[idx] * window[i], 0.0);
        }
        fft.process(&mut frame);
        let mut logmag: Vec<f64> =
            frame[..n_bins].iter().map(|c| (c.norm() + LOG_FLOOR).ln()).collect();
        let mean = logmag.iter().sum::<f64>() / n_bins as f64;
        let var = logmag.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n_bins as f64;
        let inv_std = 1.0 / var.sqrt().max(1e-6);
        for m in &mut logmag {
            *m = (*m - mean) * inv_std;
        }
        let diff: Vec<f64> = logmag.windows(2).map(|w| w[1] - w[0]).collect();
        for j in 0..d {
            let mut acc = 0.0;
            for (b, &m) in diff.iter().enumerate() {
                acc += proj[j * n_diff + b] * m;
            }
            out[t * d + j] = acc;
        }
    }
    Features::new(out, frames, d)
}

/// Frozen RVQ codec: K codebooks of C unit-norm codewords in D dimensions.
/// No operation mutates a codec after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct RvqCodec {
    /// codebooks[k] is row-major [C × D].
    codebooks: Vec<Vec<f64>>,
    k: usize,
    c: usize,
    d: usize,
    seed: u64,
}

impl RvqCodec {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn codeword(&self, k: usize, c: usize) -> &[f64] {
        &self.codebooks[k][c * self.d..(c + 1) * self.d]
    }

    /// Build from explicit codebooks (each row-major [C × D]).
    pub fn from_codebooks(codebooks: Vec<Vec<f64>>, c: usize, d: usize, seed: u64) -> Result<Self> {
        if codebooks.is_empty() || c == 0 || d == 0 {
            return Err(Error::InvalidInput("codec needs K, C, D >= 1".into()));
        }
        for (k, cb) in codebooks.iter().enumerate() {
            if cb.len() != c * d {
                return Err(Error::ShapeMismatch(format!(
                    "codebook {k} has {} values, expected {c}×{d}",
                    cb.len()
                )));
            }
        }
        let k = codebooks.len();
        Ok(RvqCodec { codebooks, k, c, d, seed })
    }

    /// Serialize as tensors named `rvq/codebook.{k}` with shape [C, D].
    pub fn to_tensor_map(&self) -> TensorMap {
        let mut map = TensorMap::new();
        for (k, cb) in self.codebooks.iter().enumerate() {
            let t = Tensor::from_f64(vec![self.c, self.d], cb.clone()).expect("shape checked");
            map.insert(&format!("rvq/codebook.{k}"), t).expect("unique names");
        }
        map
    }

    pub fn from_tensor_map(map: &TensorMap, seed: u64) -> Result<Self> {
        let mut codebooks = Vec::new();
        let mut shape: Option<(usize, usize)> = None;
        for k in 0.. {
            let name = format!("rvq/codebook.{k}");
            if !map.contains(&name) {
                break;
            }
            let t = map.get(&name)?;
            if t.shape.len() != 2 {
                return Err(Error::ShapeMismatch(format!("{name} is not 2-D")));
            }
            let dims = (t.shape[0], t.shape[1]);
            if *shape.get_or_insert(dims) != dims {
                return Err(Error::ShapeMismatch("codebooks disagree on [C, D]".into()));
            }
            codebooks.push(t.to_f64_vec());
        }
        let (c, d) = shape.ok_or_else(|| Error::Format("no rvq/codebook.* tensors found".into()))?;
        RvqCodec::from_codebooks(codebooks, c, d, seed)
    }

    /// SHA-256 over the serialized codebooks; used to verify immutability.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update([self.k as u8, self.c as u8, self.d as u8]);
        for cb in &self.codebooks {
            for v in cb {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

/// Seeded codec: unit-variance Gaussian draws, each codeword L2-normalized.
pub fn init_rvq_codec(k: usize, c: usize, d: usize, seed: u64) -> Result<RvqCodec> {
    if k == 0 || c == 0 || d == 0 {
        return Err(Error::InvalidInput("codec needs K, C, D >= 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut codebooks = Vec::with_capacity(k);
    for _ in 0..k {
        let mut cb = vec![0.0f64; c * d];
        for v in cb.iter_mut() {
            *v = next_gaussian(&mut rng);
        }
        for row in cb.chunks_mut(d) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-30);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        codebooks.push(cb);
    }
    RvqCodec::from_codebooks(codebooks, c, d, seed)
}

/// Discrete tokens, row-major [frames × K]; every entry is in [0, C).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub frames: usize,
    pub k: usize,
    pub c: usize,
}

impl TokenSequence {
    pub fn token(&self, frame: usize, k: usize) -> u32 {
        self.tokens[frame * self.k + k]
    }

    pub fn row(&self, frame: usize) -> &[u32] {
        &self.tokens[frame * self.k..(frame + 1) * self.k]
    }

    /// CSV: one row per frame, one column per codebook.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame");
        for k in 0..self.k {
            out.push_str(&format!(",codebook{k}"));
        }
        out.push('\n');
        for t in 0..self.frames {
            out.push_str(&format!("{t}"));
            for &tok in self.row(t) {
                out.push_str(&format!(",{tok}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Residual quantization: r_0 = feature; for each codebook in order, pick
/// the codeword minimizing ‖r − codeword‖² (ties → lowest index) and
/// subtract it. Per-frame, hence permutation-equivariant over frames.
pub fn tokenize(codec: &RvqCodec, features: &Features) -> Result<TokenSequence> {
    if features.dim != codec.d {
        return Err(Error::ShapeMismatch(format!(
            "feature dim {} != codec dim {}",
            features.dim, codec.d
        )));
    }
    let mut tokens = Vec::with_capacity(features.frames * codec.k);
    let mut r = vec![0.0f64; codec.d];
    for t in 0..features.frames {
        r.copy_from_slice(features.row(t));
        for k in 0..codec.k {
            let mut best = 0usize;
            let mut best_dist = f64::INFINITY;
            for c in 0..codec.c {
                let e = codec.codeword(k, c);
                let mut dist = 0.0;
                for (ri, ei) in r.iter().zip(e) {
                    let diff = ri - ei;
                    dist += diff * diff;
                }
                if dist < best_dist {
                    best_dist = dist;
                    best = c;
                }
            }
            let e = codec.codeword(k, best);
            for (ri, ei) in r.iter_mut().zip(e) {
                *ri -= ei;
            }
            tokens.push(best as u32);
        }
    }
    Ok(TokenSequence { tokens, frames: features.frames, k: codec.k, c: codec.c })
}

/// Per-codebook token counts across a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenHistogram {
    /// counts[k][c] = occurrences of codeword c in codebook k.
    pub counts: Vec<Vec<u64>>,
    pub totals: Vec<u64>,
}

impl TokenHistogram {
    pub fn zeros(k: usize, c: usize) -> Self {
        TokenHistogram { counts: vec![vec![0; c]; k], totals: vec![0; k] }
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn c(&self) -> usize {
        self.counts.first().map(|v| v.len()).unwrap_or(0)
    }

    /// Normalized distribution for codebook k; errors when it has no counts.
    pub fn distribution(&self, k: usize) -> Result<Vec<f64>> {
        let total = self.totals[k];
        if total == 0 {
            return Err(Error::InvalidInput(format!("codebook {k} has zero total count")));
        }
        Ok(self.counts[k].iter().map(|&n| n as f64 / total as f64).collect())
    }

    /// CSV: one row per codeword index, one column per codebook.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("codeword");
        for k in 0..self.k() {
            out.push_str(&format!(",codebook{k}"));
        }
        out.push('\n');
        for c in 0..self.c() {
            out.push_str(&format!("{c}"));
            for k in 0..self.k() {
                out.push_str(&format!(",{}", self.counts[k][c]));
            }
            out.push('\n');
        }
        out
    }

    /// Parse the `to_csv` layout back into a histogram. Rows must carry
    /// consecutive codeword indices starting at 0.
    pub fn from_csv(text: &str) -> Result<TokenHistogram> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty histogram CSV".into()))?;
        let k = header.split(',').count().saturating_sub(1);
        if !header.starts_with("codeword") || k == 0 {
            return Err(Error::Format(format!(
                "histogram CSV must start with a codeword,codebook... header, got {header:?}"
            )));
        }
        let mut counts = vec![Vec::new(); k];
        for (row, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut cells = line.split(',');
            let idx: usize = cells
                .next()
                .unwrap_or_default()
                .parse()
                .map_err(|_| Error::Format(format!("bad codeword index in row {row}")))?;
            if idx != row {
                return Err(Error::Format(format!(
                    "histogram rows must be consecutive; row {row} is labelled {idx}"
                )));
            }
            for col in counts.iter_mut() {
                let cell = cells.next().ok_or_else(|| {
                    Error::Format(format!("row {row} has fewer than {k} count columns"))
                })?;
                let n: u64 = cell
                    .parse()
                    .map_err(|_| Error::Format(format!("bad count {cell:?} in row {row}")))?;
                col.push(n);
            }
            if cells.next().is_some() {
                return Err(Error::Format(format!("row {row} has more than {k} count columns")));
            }
        }
        if counts[0].is_empty() {
            return Err(Error::Format("histogram CSV has no codeword rows".into()));
        }
        let totals = counts.iter().map(|col| col.iter().sum()).collect();
        Ok(TokenHistogram { counts, totals })
    }
}

/// Count token occurrences per codebook across all sequences.
pub fn token_histogram(seqs: &[TokenSequence]) -> Result<TokenHistogram> {
    let Some(first) = seqs.first() else {
        return Ok(TokenHistogram::zeros(0, 0));
    };
    let (k, c) = (first.k, first.c);
    let mut hist = TokenHistogram::zeros(k, c);
    for s in seqs {
        if s.k != k || s.c != c {
            return Err(Error::ShapeMismatch(format!(
                "mixed token shapes: ({}, {}) vs ({k}, {c})",
                s.k, s.c
            )));
        }
        for t in 0..s.frames {
            for (kk, &tok) in s.row(t).iter().enumerate() {
                hist.counts[kk][tok as usize] += 1;
                hist.totals[kk] += 1;
            }
        }
    }
    Ok(hist)
}
