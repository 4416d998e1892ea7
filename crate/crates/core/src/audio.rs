//! Log-mel spectrograms and 16-bit PCM WAV ingestion.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub mel_bins: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window: 512,
            hop: 160,
            n_fft: 512,
            mel_bins: 64,
            fmin: 50.0,
            fmax: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.window < self.hop {
            return Err(Error::invalid("window must be at least the hop, and hop positive"));
        }
        if self.n_fft < self.window {
            return Err(Error::invalid("n_fft must cover the window"));
        }
        if self.mel_bins == 0 {
            return Err(Error::invalid("mel_bins must be at least 1"));
        }
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return Err(Error::invalid("need 0 <= fmin < fmax <= sample_rate/2"));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::invalid("log_floor must be positive"));
        }
        Ok(())
    }

    pub fn frames(&self, len: usize) -> Option<usize> {
        (len >= self.window).then(|| (len - self.window) / self.hop + 1)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Band edges in Hz: `mel_bins + 2` points equally spaced on the mel scale.
pub fn mel_edges(cfg: &FeatureConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let n = cfg.mel_bins + 1;
    (0..=n).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64)).collect()
}

/// Center frequency of band `k`.
pub fn mel_center(cfg: &FeatureConfig, k: usize) -> f64 {
    mel_edges(cfg)[k + 1]
}

/// Triangular filters with unit peak, `[mel_bins][n_fft/2 + 1]`.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Vec<Vec<f64>> {
    let edges = mel_edges(cfg);
    let n_freq = cfg.n_fft / 2 + 1;
    let df = cfg.sample_rate as f64 / cfg.n_fft as f64;
    (0..cfg.mel_bins)
        .map(|k| {
            let (l, c, r) = (edges[k], edges[k + 1], edges[k + 2]);
            (0..n_freq)
                .map(|b| {
                    let f = b as f64 * df;
                    ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// `[mel_bins, frames]` natural-log mel energies. Frames start at sample 0
/// with no padding.
pub fn logmel(signal: &[f32], cfg: &FeatureConfig) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let frames = cfg.frames(signal.len()).ok_or_else(|| {
        Error::invalid(format!(
            "signal of {} samples is shorter than one {}-sample window",
            signal.len(),
            cfg.window
        ))
    })?;
    let bank = mel_filterbank(cfg);
    let window = hann(cfg.window);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let n_freq = cfg.n_fft / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut power = vec![0.0f64; n_freq];
    let mut out = vec![0.0f32; cfg.mel_bins * frames];
    for t in 0..frames {
        let start = t * cfg.hop;
        for (i, z) in buf.iter_mut().enumerate() {
            *z = match window.get(i) {
                Some(w) => Complex::new(signal[start + i] as f64 * w, 0.0),
                None => Complex::new(0.0, 0.0),
            };
        }
        fft.process(&mut buf);
        for (p, z) in power.iter_mut().zip(&buf) {
            *p = z.norm_sqr();
        }
        for (k, row) in bank.iter().enumerate() {
            let e: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
            out[k * frames + t] = e.max(cfg.log_floor).ln() as f32;
        }
    }
    Tensor::new(vec![cfg.mel_bins, frames], out)
}

/// Linear-interpolation resampling to `to` Hz; output length is
/// `round(len · to / from)`.
pub fn resample_linear(samples: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let ratio = from as f64 / to as f64;
    let len = (samples.len() as f64 * to as f64 / from as f64).round() as usize;
    let last = samples.len() - 1;
    (0..len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = (pos.floor() as usize).min(last);
            let frac = pos - j as f64;
            let a = samples[j] as f64;
            let b = samples[(j + 1).min(last)] as f64;
            (a + (b - a) * frac) as f32
        })
        .collect()
}

pub const TARGET_RATE: u32 = 16_000;

/// Reads 16-bit PCM, averages channels and resamples to 16 kHz.
pub fn load_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Wav(format!(
            "{}: unsupported encoding ({:?}, {} bits); expected 16-bit PCM",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    if !(1..=2).contains(&spec.channels) {
        return Err(Error::Wav(format!("{}: {} channels; expected mono or stereo", path.display(), spec.channels)));
    }
    let raw = reader
        .samples::<i16>()
        .collect::<std::result::Result<Vec<i16>, _>>()
        .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    let ch = spec.channels as usize;
    let mono: Vec<f32> = raw
        .chunks_exact(ch)
        .map(|f| (f.iter().map(|&s| s as f64).sum::<f64>() / (ch as f64 * 32768.0)) as f32)
        .collect();
    Ok((resample_linear(&mono, spec.sample_rate, TARGET_RATE), TARGET_RATE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_formula() {
        let cfg = FeatureConfig::default();
        assert_eq!(cfg.frames(160_000), Some(997));
        assert_eq!(cfg.frames(512), Some(1));
        assert_eq!(cfg.frames(511), None);
        for len in [512usize, 671, 672, 673, 5000] {
            let x = vec![0.0f32; len];
            let m = logmel(&x, &cfg).unwrap();
            assert_eq!(m.shape(), &[64, (len - 512) / 160 + 1]);
        }
        assert!(logmel(&[0.0; 100], &cfg).is_err());
    }

    #[test]
    fn silence_hits_the_floor() {
        let cfg = FeatureConfig::default();
        let m = logmel(&vec![0.0; 2000], &cfg).unwrap();
        let floor = (1e-10f64).ln() as f32;
        assert!(m.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn filterbank_rows() {
        let cfg = FeatureConfig::default();
        let bank = mel_filterbank(&cfg);
        assert_eq!(bank.len(), 64);
        for row in &bank {
            assert!(row.iter().all(|&w| w >= 0.0 && w <= 1.0));
            assert!(row.iter().sum::<f64>() > 0.0);
        }
        let edges = mel_edges(&cfg);
        assert!((edges[0] - 50.0).abs() < 1e-9);
        assert!((edges[65] - 8000.0).abs() < 1e-6);
        assert!(edges.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn mel_scale_round_trip() {
        for hz in [0.0, 50.0, 700.0, 1000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 999.985).abs() < 1e-2);
    }

    #[test]
    fn hann_is_periodic() {
        let w = hann(4);
        assert_eq!(w[0], 0.0);
        assert!((w[2] - 1.0).abs() < 1e-15);
        assert!((w[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn resampling_lengths() {
        let x: Vec<f32> = (0..101).map(|i| i as f32).collect();
        let up = resample_linear(&x, 8000, 16_000);
        assert_eq!(up.len(), 202);
        assert_eq!(up[1], 0.5);
        assert_eq!(up[200], 100.0);
        assert_eq!(resample_linear(&x, 16_000, 16_000), x);
        assert_eq!(resample_linear(&x, 44_100, 16_000).len(), (101.0f64 * 16_000.0 / 44_100.0).round() as usize);
    }
}
