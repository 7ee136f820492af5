//! Deterministic synthetic speech-like corpus: each speaker is a
//! harmonic source with its own pitch, spectral tilt, and resonance
//! bump; utterances vary vibrato, glide, and amplitude patterns.
//! Everything derives from (speaker, utterance), so tests can rebuild
//! the exact same audio anywhere.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::wav::{save_waveform, Waveform};
use crate::Result;

const F0_TABLE: [f64; 8] = [110.0, 146.83, 196.0, 261.63, 329.63, 392.0, 466.16, 523.25];

fn utterance_rng(speaker: usize, utterance: usize) -> ChaCha8Rng {
    let seed = (speaker as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (utterance as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
    ChaCha8Rng::seed_from_u64(seed)
}

/// Synthesizes one utterance, peak-normalized to 0.5.
pub fn harmonic_utterance(
    speaker: usize,
    utterance: usize,
    secs: f64,
    sample_rate: u32,
) -> Waveform {
    let mut rng = utterance_rng(speaker, utterance);
    let sr = sample_rate as f64;
    let f0 = F0_TABLE[speaker % F0_TABLE.len()] * (1.0 + 0.02 * (speaker / F0_TABLE.len()) as f64);
    let tilt = 0.7 + 0.12 * (speaker % 8) as f64;
    let bump_hz = 600.0 + 230.0 * (speaker % 7) as f64;

    let vib_rate = rng.gen_range(4.0..7.0);
    let vib_depth = rng.gen_range(0.005..0.02);
    let vib_phase = rng.gen_range(0.0..core::f64::consts::TAU);
    let glide = rng.gen_range(-0.05..0.05f64);
    let am_rate = rng.gen_range(1.0..3.0);
    let am_phase = rng.gen_range(0.0..core::f64::consts::TAU);
    let noise_amp = 0.003;

    let n = (secs * sr).round() as usize;
    let n_harm = ((0.45 * sr / f0) as usize).clamp(1, 40);
    let mut amps: Vec<f64> = (1..=n_harm)
        .map(|h| {
            let fh = f0 * h as f64;
            let res = 1.0 + 1.5 * (-((fh - bump_hz) / 300.0).powi(2)).exp();
            res / (h as f64).powf(tilt)
        })
        .collect();
    let total: f64 = amps.iter().sum();
    for a in &mut amps {
        *a /= total;
    }
    let mut phases: Vec<f64> = (0..n_harm)
        .map(|_| rng.gen_range(0.0..core::f64::consts::TAU))
        .collect();

    let mut samples = Vec::with_capacity(n);
    let mut peak = 0.0f64;
    for i in 0..n {
        let t = i as f64 / sr;
        let pitch = f0
            * (1.0 + glide * t / secs)
            * (1.0 + vib_depth * (core::f64::consts::TAU * vib_rate * t + vib_phase).sin());
        let env = {
            let edge = (t / 0.05).min((secs - t) / 0.05).min(1.0).max(0.0);
            let slow = 0.75 + 0.25 * (core::f64::consts::TAU * am_rate * t + am_phase).sin();
            edge * slow
        };
        let mut s = 0.0;
        for (h, (amp, phase)) in amps.iter().zip(phases.iter_mut()).enumerate() {
            *phase += core::f64::consts::TAU * pitch * (h + 1) as f64 / sr;
            s += amp * phase.sin();
        }
        s = env * s + noise_amp * (rng.gen_range(-1.0..1.0f64));
        peak = peak.max(s.abs());
        samples.push(s);
    }
    if peak > 0.0 {
        let g = 0.5 / peak;
        for s in &mut samples {
            *s *= g;
        }
    }
    Waveform {
        samples,
        sample_rate,
    }
}

/// Builds `root/spk<N>/utt<M>.wav` for every speaker and utterance.
/// Durations jitter around `secs` so frame counts differ.
pub fn write_corpus(
    root: &Path,
    speakers: usize,
    utterances: usize,
    secs: f64,
    sample_rate: u32,
) -> Result<()> {
    for s in 0..speakers {
        let dir = root.join(format!("spk{s}"));
        fs::create_dir_all(&dir).map_err(|e| crate::Error::io(&dir, e))?;
        for u in 0..utterances {
            let jitter = 1.0 + 0.12 * ((s * 31 + u * 7) % 5) as f64 / 4.0;
            let wave = harmonic_utterance(s, u, secs * jitter, sample_rate);
            save_waveform(&dir.join(format!("utt{u}.wav")), &wave)?;
        }
    }
    Ok(())
}
