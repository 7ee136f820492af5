//! One-shot conversion: content from the source utterance, speaker
//! identity from a single target utterance, neither seen in training.

use std::path::Path;

use vconv_core::model::SiameseSide;
use vconv_core::{Graph, Tensor};

use crate::checkpoint::{load_checkpoint, Checkpoint};
use crate::dataset::write_mel_cache;
use crate::griffin_lim::griffin_lim;
use crate::mel::{denormalize_mel, logmel, normalize_mel, MelConfig};
use crate::resample::resample;
use crate::wav::{load_waveform, save_waveform, Waveform};
use crate::{Error, Result};

/// Converted features in both domains the pipeline cares about.
#[derive(Debug, Clone)]
pub struct Conversion {
    /// Model output, still in the normalized training domain.
    pub mel_norm: Tensor<f32>,
    /// Natural-log mel, statistics undone; what synthesis consumes.
    pub mel_log: Tensor<f64>,
    pub mel: MelConfig,
}

/// Waveform → features in the normalized domain the model was
/// trained in.
pub fn prepare_features(
    wave: &Waveform,
    mel: &MelConfig,
    norm_mean: &[f64],
    norm_std: &[f64],
) -> Result<Tensor<f32>> {
    let wave = resample(wave, mel.sample_rate)?;
    let mut feats = logmel(&wave, mel)?.values;
    normalize_mel(&mut feats, norm_mean, norm_std);
    Ok(feats.cast())
}

/// Runs the conversion path on in-memory audio. The target passes
/// through the speaker encoder exactly as recorded: no shuffling, the
/// whole utterance pooled into one embedding.
pub fn convert_features(
    ckpt: &Checkpoint,
    source: &Waveform,
    target: &Waveform,
) -> Result<Conversion> {
    let model = &ckpt.state.model;
    let min = model.config.min_frames();
    let src = prepare_features(source, &ckpt.mel, &ckpt.norm_mean, &ckpt.norm_std)?;
    let tgt = prepare_features(target, &ckpt.mel, &ckpt.norm_mean, &ckpt.norm_std)?;
    for (name, feats) in [("source", &src), ("target", &tgt)] {
        if feats.shape()[1] < min {
            return Err(Error::TooShort(format!(
                "{name} has {} frames, the model needs at least {min}",
                feats.shape()[1]
            )));
        }
    }

    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g, false);
    let src_var = g.constant(src);
    let tgt_var = g.constant(tgt);
    let content = model.content_encode(&mut g, &bound, src_var)?;
    let (_, code) = model.speaker_encode(&mut g, &bound, tgt_var, SiameseSide::Main)?;
    let out = model.decode(&mut g, &bound, content, &code)?;

    let mel_norm = g.value(out).clone();
    let mut mel_log: Tensor<f64> = mel_norm.cast();
    denormalize_mel(&mut mel_log, &ckpt.norm_mean, &ckpt.norm_std);
    Ok(Conversion {
        mel_norm,
        mel_log,
        mel: ckpt.mel.clone(),
    })
}

pub fn convert_paths(ckpt: &Path, source: &Path, target: &Path) -> Result<Conversion> {
    let ckpt = load_checkpoint(ckpt)?;
    let source = load_waveform(source)?;
    let target = load_waveform(target)?;
    convert_features(&ckpt, &source, &target)
}

/// Writes the conversion either as a feature file (cache format,
/// natural-log domain) or, with `audio`, as a 16-bit WAV recovered by
/// phase estimation.
pub fn write_conversion(
    conv: &Conversion,
    out: &Path,
    audio: bool,
    gl_iters: usize,
) -> Result<()> {
    if audio {
        let wave = griffin_lim(&conv.mel_log, &conv.mel, gl_iters)?;
        save_waveform(out, &wave)
    } else {
        write_mel_cache(out, &conv.mel_log.cast(), conv.mel.hash())
    }
}
