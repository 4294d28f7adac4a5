//! Minimal WAV (RIFF) I/O: mono PCM 16-bit and IEEE float 32-bit.

use std::io::{Read, Write};
use std::path::Path;

use crate::dsp::AudioBuffer;
use crate::error::{Error, Result};

/// On-disk sample encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

/// Write a mono WAV file. PCM samples are clamped to [-1, 1] and scaled to
/// 16-bit; float files store the raw values.
pub fn write_wav(path: &Path, buf: &AudioBuffer, format: WavFormat) -> Result<()> {
    if buf.is_empty() {
        return Err(Error::InvalidInput("write_wav: empty audio buffer".into()));
    }
    let (fmt_code, bits): (u16, u16) = match format {
        WavFormat::Pcm16 => (1, 16),
        WavFormat::Float32 => (3, 32),
    };
    let bytes_per_sample = (bits / 8) as u32;
    let data_len = buf.len() as u32 * bytes_per_sample;
    let byte_rate = buf.sample_rate * bytes_per_sample;

    let mut out: Vec<u8> = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&fmt_code.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&buf.sample_rate.to_le_bytes());
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&(bytes_per_sample as u16).to_le_bytes()); // block align
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    match format {
        WavFormat::Pcm16 => {
            for &x in &buf.samples {
                let v = (x.clamp(-1.0, 1.0) * 32767.0).round() as i16;
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        WavFormat::Float32 => {
            for &x in &buf.samples {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    f.write_all(&out).map_err(|e| Error::io(path.to_path_buf(), e))?;
    Ok(())
}

/// Read a mono WAV file (PCM16 or float32). Unknown chunks are skipped.
pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    let fail = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));

    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(fail("not a RIFF/WAVE file"));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32)> = None; // (code, bits, rate)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(fail("chunk runs past end of file"));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(fail("fmt chunk too short"));
                }
                let code = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                if channels != 1 {
                    return Err(fail("only mono files are supported"));
                }
                fmt = Some((code, bits, rate));
            }
            b"data" => data = Some(body),
            _ => {} // skip LIST, fact, etc.
        }
        // Chunks are word-aligned: odd sizes carry a pad byte.
        pos = body_start + size + (size & 1);
    }
    let (code, bits, rate) = fmt.ok_or_else(|| fail("missing fmt chunk"))?;
    let data = data.ok_or_else(|| fail("missing data chunk"))?;
    let samples: Vec<f64> = match (code, bits) {
        (1, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32767.0)
            .collect(),
        (3, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        _ => return Err(fail("unsupported format (need PCM16 or float32)")),
    };
    if samples.is_empty() {
        return Err(fail("empty data chunk"));
    }
    AudioBuffer::new(samples, rate)
}
