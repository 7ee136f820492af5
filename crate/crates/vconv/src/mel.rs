//! Log-mel features: centered Hann STFT, triangular area-normalized
//! mel filterbank, natural-log compression with a fixed floor.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use vconv_core::{Scalar, Tensor};

use crate::wav::Waveform;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: 16_000,
            n_fft: 1024,
            win: 1024,
            hop: 256,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8_000.0,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be > 0".into()));
        }
        if self.win > self.n_fft || self.win == 0 {
            return Err(Error::Config(format!(
                "window {} must be in 1..={}",
                self.win, self.n_fft
            )));
        }
        if self.hop == 0 {
            return Err(Error::Config("hop must be > 0".into()));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be ≥ 1".into()));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= nyquist) {
            return Err(Error::Config(format!(
                "mel band [{}, {}] must sit inside [0, {nyquist}]",
                self.fmin, self.fmax
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be > 0".into()));
        }
        Ok(())
    }

    /// Stable fingerprint used by the mel cache and checkpoints to
    /// refuse artifacts produced under a different configuration.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in json.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    /// Frames produced for a waveform of `samples`: floor(len/hop)+1
    /// under center padding.
    pub fn frames_for(&self, samples: usize) -> usize {
        samples / self.hop + 1
    }
}

/// Log-domain mel energies, [n_mels × T] row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Tensor<f64>,
}

impl MelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        self.values.cast()
    }
}

fn hann(win: usize) -> Vec<f64> {
    (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * core::f64::consts::PI * i as f64 / win as f64).cos())
        .collect()
}

fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= len {
            i = 2 * len - 2 - i;
        } else {
            return i as usize;
        }
    }
}

/// Centered complex STFT: frame t covers samples around t·hop, with
/// reflect padding of n_fft/2 on both sides. Returns frames × bins
/// (bins = n_fft/2 + 1).
pub fn stft(samples: &[f64], cfg: &MelConfig) -> Result<Vec<Vec<Complex<f64>>>> {
    cfg.validate()?;
    if samples.len() < cfg.win {
        return Err(Error::TooShort(format!(
            "{} samples cannot fill one {}-sample window",
            samples.len(),
            cfg.win
        )));
    }
    let n_fft = cfg.n_fft;
    let pad = n_fft / 2;
    let window = hann(cfg.win);
    let offset = (n_fft - cfg.win) / 2;
    let frames = cfg.frames_for(samples.len());
    let bins = n_fft / 2 + 1;

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut out = Vec::with_capacity(frames);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for t in 0..frames {
        for v in buf.iter_mut() {
            *v = Complex::new(0.0, 0.0);
        }
        let start = t as isize * cfg.hop as isize - pad as isize;
        for (i, &w) in window.iter().enumerate() {
            let src = reflect(start + (offset + i) as isize, samples.len());
            buf[offset + i] = Complex::new(samples[src] * w, 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..bins].to_vec());
    }
    Ok(out)
}

/// Triangular filters with HTK mel spacing, each normalized to unit
/// area over frequency (weight 2 / bandwidth).
pub fn mel_filterbank(cfg: &MelConfig) -> Vec<Vec<f64>> {
    fn to_mel(f: f64) -> f64 {
        2595.0 * (1.0 + f / 700.0).log10()
    }
    fn from_mel(m: f64) -> f64 {
        700.0 * (10f64.powf(m / 2595.0) - 1.0)
    }
    let bins = cfg.n_fft / 2 + 1;
    let (m_lo, m_hi) = (to_mel(cfg.fmin), to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| from_mel(m_lo + (m_hi - m_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (hi - lo);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let rising = (f - lo) / (mid - lo);
                    let falling = (hi - f) / (hi - mid);
                    norm * rising.min(falling).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Magnitude STFT → mel filterbank → ln(max(·, floor)).
pub fn logmel(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::Config(format!(
            "waveform at {} Hz, features configured for {} Hz",
            w.sample_rate, cfg.sample_rate
        )));
    }
    let spec = stft(&w.samples, cfg)?;
    let bank = mel_filterbank(cfg);
    let frames = spec.len();
    let mut values = Tensor::zeros(&[cfg.n_mels, frames]);
    for (t, frame) in spec.iter().enumerate() {
        for (m, filt) in bank.iter().enumerate() {
            let e: f64 = filt
                .iter()
                .zip(frame)
                .map(|(&wgt, c)| wgt * c.norm())
                .sum();
            values.data_mut()[m * frames + t] = e.max(cfg.log_floor).ln();
        }
    }
    Ok(MelSpectrogram { values })
}

/// In-place per-bin standardization with the training statistics.
pub fn normalize_mel<T: Scalar>(mel: &mut Tensor<T>, mean: &[f64], std: &[f64]) {
    let frames = mel.shape()[1];
    for m in 0..mel.shape()[0] {
        let mu = T::from_f64(mean[m]);
        let inv = T::from_f64(1.0 / std[m]);
        for v in &mut mel.data_mut()[m * frames..(m + 1) * frames] {
            *v = (*v - mu) * inv;
        }
    }
}

/// Inverse of [`normalize_mel`].
pub fn denormalize_mel<T: Scalar>(mel: &mut Tensor<T>, mean: &[f64], std: &[f64]) {
    let frames = mel.shape()[1];
    for m in 0..mel.shape()[0] {
        let mu = T::from_f64(mean[m]);
        let s = T::from_f64(std[m]);
        for v in &mut mel.data_mut()[m * frames..(m + 1) * frames] {
            *v = *v * s + mu;
        }
    }
}
