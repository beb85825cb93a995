//! MFCC extraction and frame chunking.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::wav::AudioSignal;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfccConfig {
    pub frame_ms: f64,
    pub overlap_ms: f64,
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub pre_emphasis: f64,
    pub log_floor: f64,
    pub chunk: usize,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            frame_ms: 40.0,
            overlap_ms: 15.0,
            n_mels: 26,
            n_coeffs: 13,
            pre_emphasis: 0.97,
            log_floor: 1e-10,
            chunk: 4,
        }
    }
}

impl MfccConfig {
    pub fn hop_ms(&self) -> f64 {
        self.frame_ms - self.overlap_ms
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_ms <= 0.0 || self.hop_ms() <= 0.0 {
            return Err(Error::Config(format!(
                "frame {} ms with overlap {} ms leaves no positive hop",
                self.frame_ms, self.overlap_ms
            )));
        }
        if self.n_coeffs == 0 || self.n_coeffs > self.n_mels {
            return Err(Error::Config(format!(
                "n_coeffs {} must be in 1..={}",
                self.n_coeffs, self.n_mels
            )));
        }
        if self.chunk == 0 {
            return Err(Error::Config("chunk must be at least 1".into()));
        }
        if self.log_floor.is_nan() || self.log_floor <= 0.0 {
            return Err(Error::Config("log floor must be positive".into()));
        }
        Ok(())
    }

    pub fn frame_len(&self, sample_rate: u32) -> usize {
        (self.frame_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_len(&self, sample_rate: u32) -> usize {
        (self.hop_ms() * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn fft_size(&self, sample_rate: u32) -> usize {
        self.frame_len(sample_rate).next_power_of_two()
    }

    /// Width of one chunked feature step.
    pub fn feature_dim(&self) -> usize {
        self.chunk * self.n_coeffs
    }

    pub fn frame_count(&self, samples: usize, sample_rate: u32) -> Result<usize> {
        let frame = self.frame_len(sample_rate);
        if samples < frame || frame == 0 {
            return Err(Error::TooShort { samples, frame });
        }
        Ok((samples - frame) / self.hop_len(sample_rate) + 1)
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `n_mels + 2` edge frequencies equally spaced on the mel scale over
/// `0..sr/2`. Filter `m` rises from edge `m` to edge `m+1` and falls to edge
/// `m+2`.
pub fn mel_edges(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

pub fn mel_centers(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    mel_edges(n_mels, sample_rate)[1..=n_mels].to_vec()
}

/// Triangular weights `[n_mels × (fft_size/2 + 1)]` evaluated at each bin's
/// exact frequency.
pub fn mel_filterbank(n_mels: usize, fft_size: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let edges = mel_edges(n_mels, sample_rate);
    let bins = fft_size / 2 + 1;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / fft_size as f64;
                    if f > lo && f <= mid {
                        (f - lo) / (mid - lo)
                    } else if f > mid && f < hi {
                        (hi - f) / (hi - mid)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II rows `0..n_out` over `n_in` inputs.
pub fn dct_matrix(n_out: usize, n_in: usize) -> Vec<Vec<f64>> {
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / n_in as f64).sqrt()
            } else {
                (2.0 / n_in as f64).sqrt()
            };
            (0..n_in)
                .map(|n| scale * (PI * k as f64 * (n as f64 + 0.5) / n_in as f64).cos())
                .collect()
        })
        .collect()
}

pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Natural log of mel filterbank energies, `[frames × n_mels]`. Energies are
/// taken from the power spectrum `|X_k|² / fft_size` and floored at
/// `log_floor` before the log.
pub fn log_mel_energies(signal: &AudioSignal, config: &MfccConfig) -> Result<Tensor<f64>> {
    config.validate()?;
    let sr = signal.sample_rate;
    let frames = config.frame_count(signal.samples.len(), sr)?;
    let (frame_len, hop, nfft) = (
        config.frame_len(sr),
        config.hop_len(sr),
        config.fft_size(sr),
    );

    let x = &signal.samples;
    let mut emphasized = Vec::with_capacity(x.len());
    emphasized.push(x[0]);
    for i in 1..x.len() {
        emphasized.push(x[i] - config.pre_emphasis * x[i - 1]);
    }

    let window = hamming(frame_len);
    let bank = mel_filterbank(config.n_mels, nfft, sr);
    let fft = FftPlanner::new().plan_fft_forward(nfft);
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    let mut power = vec![0.0; nfft / 2 + 1];
    let mut out = Vec::with_capacity(frames * config.n_mels);
    for f in 0..frames {
        let start = f * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            let v = if i < frame_len {
                emphasized[start + i] * window[i]
            } else {
                0.0
            };
            *b = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p = b.norm_sqr() / nfft as f64;
        }
        for filt in &bank {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            out.push(e.max(config.log_floor).ln());
        }
    }
    Tensor::new(&[frames, config.n_mels], out)
}

/// `[frames × n_coeffs]`
pub fn mfcc(signal: &AudioSignal, config: &MfccConfig) -> Result<Tensor<f64>> {
    let logmel = log_mel_energies(signal, config)?;
    let dct = dct_matrix(config.n_coeffs, config.n_mels);
    let frames = logmel.rows();
    let mut out = Vec::with_capacity(frames * config.n_coeffs);
    for f in 0..frames {
        let row = logmel.row(f);
        for d in &dct {
            out.push(d.iter().zip(row).map(|(a, b)| a * b).sum());
        }
    }
    Tensor::new(&[frames, config.n_coeffs], out)
}

/// Concatenates consecutive groups of `chunk` frames. A final partial group
/// is completed by repeating its last frame.
pub fn chunk_frames(frames: &Tensor<f64>, chunk: usize) -> Result<Tensor<f64>> {
    if frames.rank() != 2 || chunk == 0 {
        return Err(Error::dim("chunk_frames", frames.shape(), &[chunk]));
    }
    let (n, d) = (frames.rows(), frames.cols());
    let chunks = n.div_ceil(chunk);
    let mut out = Vec::with_capacity(chunks * chunk * d);
    for c in 0..chunks {
        for k in 0..chunk {
            out.extend_from_slice(frames.row((c * chunk + k).min(n - 1)));
        }
    }
    Tensor::new(&[chunks, chunk * d], out)
}

/// MFCC followed by chunking: the per-step audio input of the models.
pub fn audio_features(signal: &AudioSignal, config: &MfccConfig) -> Result<Tensor<f64>> {
    chunk_frames(&mfcc(signal, config)?, config.chunk)
}
