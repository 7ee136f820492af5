//! PCM WAV ingestion and rendering. All samples live in [−1, 1] as
//! f64; multichannel input is downmixed by channel averaging.

use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads 16/24/32-bit integer or 32-bit float PCM. Integer samples
/// are scaled by 2^(bits−1), so 16-bit full scale 32767 maps to
/// 32767/32768.
pub fn load_waveform(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format(format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(Error::Format(format!(
                    "{}: {}-bit float is unsupported",
                    path.display(),
                    spec.bits_per_sample
                )));
            }
            reader
                .into_samples::<f32>()
                .map(|s| s.map(|v| v as f64))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        }
        hound::SampleFormat::Int => {
            let bits = spec.bits_per_sample;
            if !(1..=32).contains(&bits) {
                return Err(Error::Format(format!(
                    "{}: {bits}-bit integer is unsupported",
                    path.display()
                )));
            }
            let scale = 1.0 / f64::from(1u32 << (bits - 1));
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        }
    };
    if interleaved.len() % channels != 0 {
        return Err(Error::Format(format!(
            "{}: ragged final frame",
            path.display()
        )));
    }
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f64>() / channels as f64)
            .collect()
    };
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format(format!(
            "{}: non-finite sample",
            path.display()
        )));
    }
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Writes 16-bit PCM, clamping to full scale.
pub fn save_waveform(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(())
}
