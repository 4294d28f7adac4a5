//! Audio synthesis, resampling, segmentation, and mixup augmentation.
//!
//! All operations are pure functions of their inputs; randomized ones take
//! explicit seeds, so every result is bitwise reproducible.

pub mod cqt;
pub mod wav;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// Mono audio: dimensionless amplitudes (nominal range [-1, 1]) at a fixed
/// sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample_rate must be positive".into()));
        }
        Ok(AudioBuffer { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    fn require_nonempty(&self, op: &str) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::InvalidInput(format!("{op}: empty audio buffer")));
        }
        Ok(())
    }
}

/// Recipe for one synthetic "culture": a pitch vocabulary plus timbre and
/// tempo parameters. Distinct cultures are built from distinct pitch sets
/// (disjoint or overlapping scales), which makes cross-culture similarity
/// and transfer measurable by construction.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SynthCultureSpec {
    /// Fundamental frequencies (Hz) events draw from.
    pub pitch_set: Vec<f64>,
    /// Seed for the harmonic amplitude profile shared by all clips.
    pub timbre_seed: u64,
    /// (min, max) events per second.
    pub tempo_range: (f64, f64),
    /// Seed for event-level draws (pitch, timing, amplitude).
    pub rng_seed: u64,
    pub sample_rate: u32,
}

impl Default for SynthCultureSpec {
    fn default() -> Self {
        SynthCultureSpec {
            pitch_set: vec![220.0, 277.18, 329.63, 440.0],
            timbre_seed: 1,
            tempo_range: (1.0, 4.0),
            rng_seed: 0,
            sample_rate: 24_000,
        }
    }
}

impl SynthCultureSpec {
    fn validate(&self) -> Result<()> {
        if self.pitch_set.is_empty() {
            return Err(Error::InvalidInput("pitch_set must be non-empty".into()));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        for &f in &self.pitch_set {
            if !(f > 0.0 && f < nyquist) {
                return Err(Error::InvalidInput(format!(
                    "pitch {f} Hz outside (0, {nyquist}) Hz"
                )));
            }
        }
        if !(self.tempo_range.0 > 0.0 && self.tempo_range.1 >= self.tempo_range.0) {
            return Err(Error::InvalidInput(format!(
                "invalid tempo range {:?}",
                self.tempo_range
            )));
        }
        Ok(())
    }
}

/// Pure sinusoid with phase 0 at sample 0; length = round(duration · rate).
pub fn synth_sine(freq: f64, duration: f64, sample_rate: u32, amplitude: f64) -> Result<AudioBuffer> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(freq > 0.0 && freq < nyquist) {
        return Err(Error::InvalidInput(format!(
            "frequency {freq} Hz outside (0, {nyquist}) Hz"
        )));
    }
    if duration <= 0.0 {
        return Err(Error::InvalidInput("duration must be positive".into()));
    }
    if !(amplitude > 0.0 && amplitude <= 1.0) {
        return Err(Error::InvalidInput("amplitude must be in (0, 1]".into()));
    }
    let n = (duration * sample_rate as f64).round() as usize;
    let w = 2.0 * std::f64::consts::PI * freq / sample_rate as f64;
    let samples = (0..n).map(|i| amplitude * (w * i as f64).sin()).collect();
    AudioBuffer::new(samples, sample_rate)
}

/// A clip of enveloped harmonic tones whose fundamentals are drawn only from
/// `spec.pitch_set`. Deterministic given the spec's seeds.
pub fn synth_culture_clip(spec: &SynthCultureSpec, duration: f64) -> Result<AudioBuffer> {
    spec.validate()?;
    if duration <= 0.0 {
        return Err(Error::InvalidInput("duration must be positive".into()));
    }
    let sr = spec.sample_rate as f64;
    let n = (duration * sr).round() as usize;
    let mut samples = vec![0.0f64; n];

    // Harmonic profile (a property of the culture's "instrument", not of the
    // clip): partial amplitudes decay so the fundamental always dominates.
    let mut timbre_rng = rng_from_seed(derive_seed(spec.timbre_seed, &[0x7131]));
    let h2 = timbre_rng.gen_range(0.10..0.35);
    let h3 = timbre_rng.gen_range(0.05..0.20);
    let harmonics = [1.0, h2, h3];

    let mut rng = rng_from_seed(derive_seed(spec.rng_seed, &[0xC11F]));
    let nyquist = sr / 2.0;
    let mut start = 0usize;
    while start < n {
        let rate = rng.gen_range(spec.tempo_range.0..=spec.tempo_range.1);
        let pitch = spec.pitch_set[rng.gen_range(0..spec.pitch_set.len())];
        let amp = rng.gen_range(0.3..0.7);
        let event_len = ((sr / rate).round() as usize).clamp(1, n - start);

        // Linear attack/release envelope, capped at a quarter of the event.
        let attack = ((0.010 * sr) as usize).min(event_len / 4).max(1);
        let release = ((0.050 * sr) as usize).min(event_len / 4).max(1);
        for i in 0..event_len {
            let env = if i < attack {
                i as f64 / attack as f64
            } else if i + release > event_len {
                (event_len - i) as f64 / release as f64
            } else {
                1.0
            };
            let t = i as f64 / sr;
            let mut v = 0.0;
            for (j, &h) in harmonics.iter().enumerate() {
                let f = pitch * (j + 1) as f64;
                if f < nyquist {
                    v += h * (2.0 * std::f64::consts::PI * f * t).sin();
                }
            }
            samples[start + i] += amp * env * v / harmonics.iter().sum::<f64>();
        }
        start += event_len;
    }
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Band-limited resampling via a Hann-windowed sinc kernel. Equal rates are
/// a bitwise identity; output length = round(len · target / source).
pub fn resample(buf: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    buf.require_nonempty("resample")?;
    if target_rate == 0 {
        return Err(Error::InvalidInput("target_rate must be positive".into()));
    }
    if target_rate == buf.sample_rate {
        return Ok(buf.clone());
    }
    let src = buf.sample_rate as f64;
    let dst = target_rate as f64;
    let ratio = dst / src;
    let out_len = (buf.len() as f64 * ratio).round() as usize;

    // When downsampling, lower the cutoff and widen the kernel to anti-alias.
    let cutoff = ratio.min(1.0);
    let base_taps = 32.0;
    let half_width = base_taps / cutoff;

    let sinc = |x: f64| {
        if x.abs() < 1e-12 {
            1.0
        } else {
            let px = std::f64::consts::PI * x;
            px.sin() / px
        }
    };
    let n = buf.len() as isize;
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let t = j as f64 / ratio; // position in source samples
        let lo = (t - half_width).ceil() as isize;
        let hi = (t + half_width).floor() as isize;
        let mut acc = 0.0;
        for k in lo.max(0)..=hi.min(n - 1) {
            let d = t - k as f64;
            // Hann window over the kernel support.
            let w = 0.5 + 0.5 * (std::f64::consts::PI * d / half_width).cos();
            acc += buf.samples[k as usize] * cutoff * sinc(cutoff * d) * w;
        }
        out.push(acc);
    }
    AudioBuffer::new(out, target_rate)
}

/// How [`crop_segment`] treats crops that run past the end of the source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadPolicy {
    Reject,
    ZeroPad,
}

/// Exactly `length` seconds starting at `start`; shorter sources either fail
/// or are zero-padded at the tail depending on `pad_policy`.
pub fn crop_segment(
    buf: &AudioBuffer,
    start: f64,
    length: f64,
    pad_policy: PadPolicy,
) -> Result<AudioBuffer> {
    buf.require_nonempty("crop_segment")?;
    if start < 0.0 {
        return Err(Error::InvalidInput("crop start must be >= 0".into()));
    }
    if length <= 0.0 {
        return Err(Error::InvalidInput("crop length must be positive".into()));
    }
    let sr = buf.sample_rate as f64;
    let start_i = (start * sr).round() as usize;
    let n = (length * sr).round() as usize;
    if start_i + n > buf.len() && pad_policy == PadPolicy::Reject {
        return Err(Error::InvalidInput(format!(
            "crop [{start}, {start}+{length}) s runs past a {:.3} s buffer",
            buf.duration_seconds()
        )));
    }
    let mut samples = vec![0.0f64; n];
    if start_i < buf.len() {
        let avail = (buf.len() - start_i).min(n);
        samples[..avail].copy_from_slice(&buf.samples[start_i..start_i + avail]);
    }
    AudioBuffer::new(samples, buf.sample_rate)
}

/// In-batch noise mixture: each element independently, with probability
/// `prob`, becomes `(1-g)·self + g·other` for a uniformly chosen *different*
/// batch element (mixing partners are the original inputs). `gain` fixes `g`;
/// when `None`, `g` is drawn uniformly from [0.1, 0.5] per mixed element.
/// Unselected elements pass through bitwise.
pub fn mixup_batch(
    batch: &[AudioBuffer],
    prob: f64,
    gain: Option<f64>,
    rng_seed: u64,
) -> Result<Vec<AudioBuffer>> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::InvalidInput("mixup prob must be in [0, 1]".into()));
    }
    if let Some(g) = gain {
        if !(g > 0.0 && g < 1.0) {
            return Err(Error::InvalidInput("mixup gain must be in (0, 1)".into()));
        }
    }
    if prob > 0.0 && batch.len() < 2 {
        return Err(Error::InvalidInput("mixup needs at least 2 buffers when prob > 0".into()));
    }
    for b in batch {
        if b.len() != batch[0].len() || b.sample_rate != batch[0].sample_rate {
            return Err(Error::InvalidInput(
                "mixup requires equal lengths and sample rates".into(),
            ));
        }
        b.require_nonempty("mixup_batch")?;
    }
    let mut rng = rng_from_seed(rng_seed);
    let mut out = Vec::with_capacity(batch.len());
    for (i, b) in batch.iter().enumerate() {
        if rng.gen::<f64>() >= prob {
            out.push(b.clone());
            continue;
        }
        // Uniform over the other indices: draw from 0..n-1 and skip self.
        let mut j = rng.gen_range(0..batch.len() - 1);
        if j >= i {
            j += 1;
        }
        let g = match gain {
            Some(g) => g,
            None => rng.gen_range(0.1..0.5),
        };
        let samples = b
            .samples
            .iter()
            .zip(&batch[j].samples)
            .map(|(&a, &o)| (1.0 - g) * a + g * o)
            .collect();
        out.push(AudioBuffer::new(samples, b.sample_rate)?);
    }
    Ok(out)
}
