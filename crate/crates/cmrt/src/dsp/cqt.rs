//! Constant-Q transform.
//!
//! Realized as an FFT-based filterbank: each bin gets a Q-matched,
//! Hann-windowed complex kernel; frames are centered on the hop grid with
//! reflection padding, so frame `k` covers sample `k·hop` and the frame
//! count is `ceil(len / hop)` — the same grid the model's feature extractor
//! produces. The transform is linear in input amplitude; a pure tone of
//! amplitude A yields a peak magnitude of about A/2 at its bin.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::dsp::AudioBuffer;
use crate::error::{Error, Result};

/// Spectral kernel coefficients below this fraction of the kernel's peak are
/// dropped; the operator stays exactly linear, just slightly band-limited.
const KERNEL_SPARSITY: f64 = 1e-5;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CqtConfig {
    pub f_min: f64,
    pub bins_per_octave: usize,
    pub n_bins: usize,
    /// Frames per second; the hop is `sample_rate / frame_rate` and must be
    /// an integer.
    pub frame_rate: u32,
}

impl Default for CqtConfig {
    /// C1 through eight octaves at semitone resolution, on the 75 Hz frame
    /// grid the model uses.
    fn default() -> Self {
        CqtConfig { f_min: 32.70, bins_per_octave: 12, n_bins: 84, frame_rate: 75 }
    }
}

impl CqtConfig {
    pub fn bin_frequency(&self, bin: usize) -> f64 {
        self.f_min * 2f64.powf(bin as f64 / self.bins_per_octave as f64)
    }
}

/// Closed-form frequency-to-bin mapping: round(bpo · log2(f / f_min)).
pub fn frequency_to_bin(freq: f64, f_min: f64, bins_per_octave: usize) -> usize {
    (bins_per_octave as f64 * (freq / f_min).log2()).round() as usize
}

/// Magnitude CQT, row-major [frames × bins]. All magnitudes are >= 0.
#[derive(Debug, Clone, PartialEq)]
pub struct CqtMatrix {
    pub mags: Vec<f64>,
    pub frames: usize,
    pub bins: usize,
    pub bins_per_octave: usize,
    pub f_min: f64,
    pub frame_rate: f64,
}

impl CqtMatrix {
    pub fn at(&self, frame: usize, bin: usize) -> f64 {
        self.mags[frame * self.bins + bin]
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        &self.mags[frame * self.bins..(frame + 1) * self.bins]
    }

    pub fn argmax_bin(&self, frame: usize) -> usize {
        let row = self.row(frame);
        let mut best = 0;
        for (b, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = b;
            }
        }
        best
    }

    /// One CSV line per frame, magnitudes comma-separated.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for f in 0..self.frames {
            let row: Vec<String> = self.row(f).iter().map(|v| format!("{v:.9e}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Precomputed kernels for one (sample_rate, config) pair. Building a plan
/// costs a handful of FFTs; reuse it when transforming many clips.
pub struct CqtPlan {
    sample_rate: u32,
    config: CqtConfig,
    hop: usize,
    n_fft: usize,
    fft: Arc<dyn Fft<f64>>,
    /// Per bin: sparse (fft_index, conj(kernel_fft)/n_fft) pairs.
    kernels: Vec<Vec<(usize, Complex<f64>)>>,
}

impl CqtPlan {
    pub fn new(sample_rate: u32, config: &CqtConfig) -> Result<Self> {
        if config.f_min <= 0.0 || config.n_bins == 0 || config.bins_per_octave == 0 {
            return Err(Error::InvalidInput("invalid CQT configuration".into()));
        }
        if config.frame_rate == 0 || !sample_rate.is_multiple_of(config.frame_rate) {
            return Err(Error::InvalidInput(format!(
                "frame rate {} must divide sample rate {}",
                config.frame_rate, sample_rate
            )));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let f_top = config.bin_frequency(config.n_bins - 1);
        if f_top >= nyquist {
            return Err(Error::InvalidInput(format!(
                "top CQT bin {f_top:.2} Hz is at or above Nyquist {nyquist} Hz"
            )));
        }
        let hop = (sample_rate / config.frame_rate) as usize;

        let q = 1.0 / (2f64.powf(1.0 / config.bins_per_octave as f64) - 1.0);
        let win_len = |f: f64| ((q * sample_rate as f64 / f).round() as usize).max(2);
        let n_fft = win_len(config.f_min).next_power_of_two();

        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n_fft);
        let mut kernels = Vec::with_capacity(config.n_bins);
        for b in 0..config.n_bins {
            let f_b = config.bin_frequency(b);
            let n_b = win_len(f_b).min(n_fft);
            let mut w_sum = 0.0;
            let mut kern = vec![Complex::new(0.0, 0.0); n_fft];
            let start = (n_fft - n_b) / 2;
            let center = (n_b - 1) as f64 / 2.0;
            for i in 0..n_b {
                let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n_b - 1) as f64).cos();
                w_sum += w;
                let phase = 2.0 * std::f64::consts::PI * f_b * (i as f64 - center)
                    / sample_rate as f64;
                kern[start + i] = Complex::from_polar(w, phase);
            }
            for v in kern.iter_mut() {
                *v /= w_sum;
            }
            fft.process(&mut kern);
            let peak = kern.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
            let sparse: Vec<(usize, Complex<f64>)> = kern
                .iter()
                .enumerate()
                .filter(|(_, c)| c.norm() >= KERNEL_SPARSITY * peak)
                .map(|(i, c)| (i, c.conj() / n_fft as f64))
                .collect();
            kernels.push(sparse);
        }
        Ok(CqtPlan { sample_rate, config: config.clone(), hop, n_fft, fft, kernels })
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn compute(&self, buf: &AudioBuffer) -> Result<CqtMatrix> {
        if buf.is_empty() {
            return Err(Error::InvalidInput("compute_cqt: empty audio buffer".into()));
        }
        if buf.sample_rate != self.sample_rate {
            return Err(Error::InvalidInput(format!(
                "buffer rate {} does not match plan rate {}",
                buf.sample_rate, self.sample_rate
            )));
        }
        let frames = buf.len().div_ceil(self.hop);
        let mut mags = vec![0.0f64; frames * self.config.n_bins];
        let mut frame = vec![Complex::new(0.0, 0.0); self.n_fft];
        let half = (self.n_fft / 2) as isize;
        for k in 0..frames {
            let center = (k * self.hop) as isize;
            for (t, slot) in frame.iter_mut().enumerate() {
                let idx = reflect_index(center - half + t as isize, buf.len());
                *slot = Complex::new(buf.samples[idx], 0.0);
            }
            self.fft.process(&mut frame);
            for (b, kern) in self.kernels.iter().enumerate() {
                let mut acc = Complex::new(0.0, 0.0);
                for &(i, c) in kern {
                    acc += frame[i] * c;
                }
                mags[k * self.config.n_bins + b] = acc.norm();
            }
        }
        Ok(CqtMatrix {
            mags,
            frames,
            bins: self.config.n_bins,
            bins_per_octave: self.config.bins_per_octave,
            f_min: self.config.f_min,
            frame_rate: self.config.frame_rate as f64,
        })
    }
}

/// One-shot CQT; builds a plan and discards it.
pub fn compute_cqt(buf: &AudioBuffer, config: &CqtConfig) -> Result<CqtMatrix> {
    CqtPlan::new(buf.sample_rate, config)?.compute(buf)
}

/// Mirror an out-of-range index back into [0, len) without repeating edge
/// samples (period 2·(len−1)); applies as many reflections as needed.
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    debug_assert!(len > 0);
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::synth_sine;

    #[test]
    fn reflect_index_mirrors() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-4, 5), 4);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(8, 5), 0);
        assert_eq!(reflect_index(3, 5), 3);
        assert_eq!(reflect_index(-7, 1), 0);
    }

    #[test]
    fn zero_signal_gives_zero_magnitudes() {
        let buf = AudioBuffer::new(vec![0.0; 24_000], 24_000).unwrap();
        let m = compute_cqt(&buf, &CqtConfig::default()).unwrap();
        assert!(m.mags.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frame_count_is_ceil_len_over_hop() {
        let cfg = CqtConfig::default();
        for len in [1usize, 319, 320, 321, 24_000, 24_001] {
            let buf = AudioBuffer::new(vec![0.1; len], 24_000).unwrap();
            let m = compute_cqt(&buf, &cfg).unwrap();
            assert_eq!(m.frames, len.div_ceil(320), "len {len}");
        }
    }

    #[test]
    fn tone_440_peaks_at_bin_45() {
        // round(12 · log2(440 / 32.70)) = round(45.0017) = 45.
        assert_eq!(frequency_to_bin(440.0, 32.70, 12), 45);
        let buf = synth_sine(440.0, 1.0, 24_000, 0.5).unwrap();
        let m = compute_cqt(&buf, &CqtConfig::default()).unwrap();
        for k in 2..m.frames - 2 {
            assert_eq!(m.argmax_bin(k), 45, "frame {k}");
        }
    }

    #[test]
    fn linear_in_amplitude() {
        let cfg = CqtConfig::default();
        let plan = CqtPlan::new(24_000, &cfg).unwrap();
        let a = synth_sine(261.63, 0.5, 24_000, 0.3).unwrap();
        let b = AudioBuffer::new(a.samples.iter().map(|x| 2.0 * x).collect(), 24_000).unwrap();
        let ma = plan.compute(&a).unwrap();
        let mb = plan.compute(&b).unwrap();
        for (x, y) in ma.mags.iter().zip(&mb.mags) {
            if *x > 1e-30 {
                assert!((y / x - 2.0).abs() < 1e-6, "ratio {}", y / x);
            } else {
                assert!(*y <= 2e-30);
            }
        }
    }

    #[test]
    fn rejects_top_bin_at_nyquist() {
        let cfg = CqtConfig { f_min: 8000.0, bins_per_octave: 12, n_bins: 12, frame_rate: 75 };
        assert!(CqtPlan::new(24_000, &cfg).is_err());
    }

    #[test]
    fn rejects_non_integer_hop() {
        let cfg = CqtConfig { frame_rate: 77, ..CqtConfig::default() };
        assert!(CqtPlan::new(24_000, &cfg).is_err());
    }
}
