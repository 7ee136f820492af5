//! Waveform recovery from log-mel features: ridge-regularized
//! filterbank inversion to a linear magnitude spectrogram, then
//! iterative phase estimation with alternating STFT projections.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use vconv_core::Tensor;

use crate::mel::{mel_filterbank, stft, MelConfig};
use crate::wav::Waveform;
use crate::{Error, Result};

/// Lower-triangular Cholesky factor of a symmetric positive-definite
/// matrix, stored dense row-major.
fn cholesky(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Format(
                        "filterbank Gram matrix is not positive definite".into(),
                    ));
                }
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Ok(l)
}

fn chol_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x
}

/// Least-squares inversion of the mel projection: per frame solves
/// (B Bᵀ + λI) y = e and returns max(Bᵀ y, 0), one magnitude vector
/// per frame. `mel_log` is in the natural-log domain.
pub fn mel_to_linear(mel_log: &Tensor<f64>, cfg: &MelConfig) -> Result<Vec<Vec<f64>>> {
    let bank = mel_filterbank(cfg);
    let n = cfg.n_mels;
    let bins = cfg.n_fft / 2 + 1;
    if mel_log.shape()[0] != n {
        return Err(Error::Config(format!(
            "features have {} bins, configuration expects {n}",
            mel_log.shape()[0]
        )));
    }
    let mut gram = vec![vec![0.0; n]; n];
    let mut trace = 0.0;
    for i in 0..n {
        for j in 0..=i {
            let dot: f64 = (0..bins).map(|k| bank[i][k] * bank[j][k]).sum();
            gram[i][j] = dot;
            gram[j][i] = dot;
        }
        trace += gram[i][i];
    }
    let ridge = 1e-8 * trace / n as f64;
    for (i, row) in gram.iter_mut().enumerate() {
        row[i] += ridge;
    }
    let l = cholesky(&gram)?;

    let frames = mel_log.shape()[1];
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let e: Vec<f64> = (0..n).map(|m| mel_log.data()[m * frames + t].exp()).collect();
        let y = chol_solve(&l, &e);
        let mag: Vec<f64> = (0..bins)
            .map(|k| (0..n).map(|m| bank[m][k] * y[m]).sum::<f64>().max(0.0))
            .collect();
        out.push(mag);
    }
    Ok(out)
}

/// Inverse STFT by windowed overlap-add, undoing the center padding.
/// Output covers (frames − 1) · hop samples.
pub fn istft(spec: &[Vec<Complex<f64>>], cfg: &MelConfig) -> Vec<f64> {
    let n_fft = cfg.n_fft;
    let pad = n_fft / 2;
    let frames = spec.len();
    if frames == 0 {
        return Vec::new();
    }
    let window: Vec<f64> = (0..cfg.win)
        .map(|i| 0.5 - 0.5 * (2.0 * core::f64::consts::PI * i as f64 / cfg.win as f64).cos())
        .collect();
    let offset = (n_fft - cfg.win) / 2;
    let out_len = (frames - 1) * cfg.hop;

    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(n_fft);
    let mut acc = vec![0.0; out_len];
    let mut den = vec![0.0; out_len];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for (t, frame) in spec.iter().enumerate() {
        for (k, v) in frame.iter().enumerate() {
            buf[k] = *v;
        }
        for k in 1..n_fft / 2 {
            buf[n_fft - k] = frame[k].conj();
        }
        ifft.process(&mut buf);
        let start = t as isize * cfg.hop as isize - pad as isize;
        for (i, &w) in window.iter().enumerate() {
            let idx = start + (offset + i) as isize;
            if idx < 0 || idx >= out_len as isize {
                continue;
            }
            let sample = buf[offset + i].re / n_fft as f64;
            acc[idx as usize] += w * sample;
            den[idx as usize] += w * w;
        }
    }
    for (a, d) in acc.iter_mut().zip(&den) {
        *a /= d.max(1e-12);
    }
    acc
}

/// Recovers a waveform from natural-log mel features. Phase starts at
/// zero and is refined by `iters` alternating projections; the result
/// is peak-limited to 0.97.
pub fn griffin_lim(mel_log: &Tensor<f64>, cfg: &MelConfig, iters: usize) -> Result<Waveform> {
    cfg.validate()?;
    let mags = mel_to_linear(mel_log, cfg)?;
    let frames = mags.len();
    let bins = cfg.n_fft / 2 + 1;

    let mut spec: Vec<Vec<Complex<f64>>> = mags
        .iter()
        .map(|m| m.iter().map(|&v| Complex::new(v, 0.0)).collect())
        .collect();
    for _ in 0..iters {
        let x = istft(&spec, cfg);
        if x.len() < cfg.win {
            break;
        }
        let est = stft(&x, cfg)?;
        for t in 0..frames.min(est.len()) {
            for k in 0..bins {
                let c = est[t][k];
                let norm = c.norm();
                let phase = if norm > 1e-12 {
                    c / norm
                } else {
                    Complex::new(1.0, 0.0)
                };
                spec[t][k] = phase * mags[t][k];
            }
        }
    }
    let mut samples = istft(&spec, cfg);
    let peak = samples.iter().fold(0.0f64, |p, s| p.max(s.abs()));
    if peak > 1e-8 {
        let g = 0.97 / peak;
        for s in &mut samples {
            *s *= g;
        }
    }
    Ok(Waveform {
        samples,
        sample_rate: cfg.sample_rate,
    })
}
