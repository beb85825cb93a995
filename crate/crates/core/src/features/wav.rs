//! 16-bit PCM mono RIFF/WAVE reading and writing.

use std::path::Path;

use crate::error::{Error, Result};

/// Mono samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        Ok(AudioSignal {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn wav_err(field: &'static str, detail: impl Into<String>) -> Error {
    Error::WavFormat {
        field,
        detail: detail.into(),
    }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn parse_wav(bytes: &[u8]) -> Result<AudioSignal> {
    if bytes.len() < 12 {
        return Err(wav_err("header", "file shorter than the RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(wav_err("riff", "missing RIFF tag"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(wav_err("wave", "missing WAVE tag"));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(wav_err("fmt", "truncated format chunk"));
                }
                format = Some((
                    u16_at(bytes, body),
                    u16_at(bytes, body + 2),
                    u32_at(bytes, body + 4),
                    u16_at(bytes, body + 14),
                ));
            }
            b"data" => {
                let (audio_format, channels, sample_rate, bits) =
                    format.ok_or_else(|| wav_err("fmt", "data chunk before format chunk"))?;
                if audio_format != 1 {
                    return Err(wav_err(
                        "audio_format",
                        format!("{audio_format} is not PCM (1)"),
                    ));
                }
                if channels != 1 {
                    return Err(wav_err(
                        "channels",
                        format!("{channels} channels, expected mono"),
                    ));
                }
                if bits != 16 {
                    return Err(wav_err("bits_per_sample", format!("{bits}, expected 16")));
                }
                if sample_rate == 0 {
                    return Err(wav_err("sample_rate", "zero"));
                }
                if body + size > bytes.len() {
                    return Err(wav_err("data", "chunk extends past end of file"));
                }
                let samples = bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                return Ok(AudioSignal {
                    samples,
                    sample_rate,
                });
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(wav_err("data", "no data chunk"))
}

pub fn read_wav(path: &Path) -> Result<AudioSignal> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes)
}

/// Samples are clipped to `[-1, 1]` and quantized to `round(x·32768)`,
/// saturating at 32767.
pub fn encode_wav(signal: &AudioSignal) -> Vec<u8> {
    let data_len = signal.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&signal.sample_rate.to_le_bytes());
    out.extend_from_slice(&(signal.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &signal.samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0)
            .round()
            .clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: &Path, signal: &AudioSignal) -> Result<()> {
    std::fs::write(path, encode_wav(signal)).map_err(|e| Error::io(path, e))
}
