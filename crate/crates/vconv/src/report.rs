//! Evaluation artifacts: speaker-embedding extraction with
//! cosine-separation statistics, and a model summary with parameter
//! accounting and a timed conversion.

use std::fmt;
use std::fs;
use std::path::Path;
use std::time::Instant;

use vconv_core::model::SiameseSide;
use vconv_core::{Graph, Model, ParamBreakdown, Tensor};

use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::{Error, Result};

/// Published size of the system this architecture is scaled against.
pub const BASELINE_PARAMS: usize = 1_310_000;

#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub speakers: Vec<String>,
    pub utterances: Vec<String>,
    pub vectors: Vec<Vec<f32>>,
}

/// One pooled speaker embedding per usable utterance. The dataset
/// must already be normalized; utterances shorter than the model's
/// receptive floor are skipped with a warning.
pub fn extract_embeddings(model: &Model<f32>, ds: &Dataset) -> Result<EmbeddingSet> {
    assert!(ds.is_normalized(), "normalize the dataset first");
    let min = model.config.min_frames();
    let mut set = EmbeddingSet {
        dim: model.config.speaker_width,
        speakers: Vec::new(),
        utterances: Vec::new(),
        vectors: Vec::new(),
    };
    for (entry, mel) in ds.manifest.entries.iter().zip(&ds.mels) {
        if entry.n_frames < min {
            eprintln!(
                "warning: skipping {}/{} ({} frames is below the model minimum of {min})",
                entry.speaker_id, entry.utterance_id, entry.n_frames
            );
            continue;
        }
        let mut g = Graph::<f32>::new();
        let bound = model.bind(&mut g, false);
        let v = g.constant(mel.clone());
        let (emb, _) = model.speaker_encode(&mut g, &bound, v, SiameseSide::Main)?;
        set.speakers.push(entry.speaker_id.clone());
        set.utterances.push(entry.utterance_id.clone());
        set.vectors.push(g.value(emb).data().to_vec());
    }
    if set.vectors.is_empty() {
        return Err(Error::Format("no utterance was long enough to embed".into()));
    }
    Ok(set)
}

fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        dot += *x as f64 * *y as f64;
        na += *x as f64 * *x as f64;
        nb += *y as f64 * *y as f64;
    }
    let denom = (na.sqrt() * nb.sqrt()).max(1e-30);
    1.0 - dot / denom
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationReport {
    /// Mean cosine distance between utterances of the same speaker.
    pub intra_mean: f64,
    /// Mean cosine distance across speakers.
    pub inter_mean: f64,
    /// Mean silhouette over cosine distance; positive once speakers
    /// form tighter clusters than the space between them.
    pub silhouette: f64,
    pub n_utterances: usize,
    pub n_speakers: usize,
}

pub fn separation_report(set: &EmbeddingSet) -> Result<SeparationReport> {
    let n = set.vectors.len();
    let mut labels: Vec<&str> = set.speakers.iter().map(|s| s.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(Error::Format(
            "separation needs utterances from at least two speakers".into(),
        ));
    }

    let mut d = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = cosine_distance(&set.vectors[i], &set.vectors[j]);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }

    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..n {
        for j in i + 1..n {
            if set.speakers[i] == set.speakers[j] {
                intra = (intra.0 + d[i * n + j], intra.1 + 1);
            } else {
                inter = (inter.0 + d[i * n + j], inter.1 + 1);
            }
        }
    }
    if intra.1 == 0 {
        return Err(Error::Format(
            "separation needs at least one speaker with two utterances".into(),
        ));
    }

    let mut silhouette = 0.0;
    for i in 0..n {
        let mut own = (0.0, 0usize);
        let mut best_other = f64::INFINITY;
        for label in &labels {
            let (mut s, mut c) = (0.0, 0usize);
            for j in 0..n {
                if j != i && set.speakers[j] == *label {
                    s += d[i * n + j];
                    c += 1;
                }
            }
            if *label == set.speakers[i] {
                own = (s, c);
            } else if c > 0 {
                best_other = best_other.min(s / c as f64);
            }
        }
        // Singleton clusters score zero by convention.
        if own.1 > 0 {
            let a = own.0 / own.1 as f64;
            let b = best_other;
            silhouette += (b - a) / a.max(b).max(1e-30);
        }
    }

    Ok(SeparationReport {
        intra_mean: intra.0 / intra.1 as f64,
        inter_mean: inter.0 / inter.1.max(1) as f64,
        silhouette: silhouette / n as f64,
        n_utterances: n,
        n_speakers: labels.len(),
    })
}

/// Tab-separated export: speaker, utterance, then one column per
/// embedding dimension.
pub fn export_tsv(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let mut out = String::from("speaker\tutterance");
    for i in 0..set.dim {
        out.push_str(&format!("\te{i}"));
    }
    out.push('\n');
    for ((spk, utt), vec) in set.speakers.iter().zip(&set.utterances).zip(&set.vectors) {
        out.push_str(spk);
        out.push('\t');
        out.push_str(utt);
        for v in vec {
            out.push_str(&format!("\t{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct ModelReport {
    pub step: u64,
    pub breakdown: ParamBreakdown,
    /// Extra parameters the sibling branch adds beyond the shared
    /// encoder: zero, by construction.
    pub sibling_extra_params: usize,
    /// Estimator parameters, listed separately because they never
    /// ship with the converter.
    pub estimator_params: usize,
    pub baseline_params: usize,
    /// Wall time for a 128-frame conversion, if requested.
    pub convert_micros: Option<u128>,
}

pub fn model_report(ckpt: &Checkpoint, time_conversion: bool) -> Result<ModelReport> {
    let model = &ckpt.state.model;
    let breakdown = model.param_breakdown();
    let convert_micros = if time_conversion {
        let frames = 128.max(model.config.min_frames());
        let mut mel = Tensor::zeros(&[model.config.n_mels, frames]);
        for (i, v) in mel.data_mut().iter_mut().enumerate() {
            *v = ((i % 17) as f32 - 8.0) * 0.1;
        }
        let start = Instant::now();
        let mut g = Graph::<f32>::new();
        let bound = model.bind(&mut g, false);
        let v = g.constant(mel);
        let content = model.content_encode(&mut g, &bound, v)?;
        let (_, code) = model.speaker_encode(&mut g, &bound, v, SiameseSide::Main)?;
        let out = model.decode(&mut g, &bound, content, &code)?;
        let _ = g.value(out);
        Some(start.elapsed().as_micros())
    } else {
        None
    };
    Ok(ModelReport {
        step: ckpt.state.step,
        breakdown,
        sibling_extra_params: model.params.scalar_count() - breakdown.total,
        estimator_params: ckpt.state.estimator.params.scalar_count(),
        baseline_params: BASELINE_PARAMS,
        convert_micros,
    })
}

impl fmt::Display for ModelReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "trained steps:        {}", self.step)?;
        writeln!(f, "content encoder:      {:>9}", self.breakdown.content_encoder)?;
        writeln!(f, "speaker encoder:      {:>9}", self.breakdown.speaker_encoder)?;
        writeln!(f, "  sibling branch adds {:>9}", self.sibling_extra_params)?;
        writeln!(f, "decoder:              {:>9}", self.breakdown.decoder)?;
        writeln!(f, "conversion total:     {:>9}", self.breakdown.total)?;
        writeln!(
            f,
            "reference system:     {:>9} ({:+.1}% vs this model)",
            self.baseline_params,
            100.0 * (self.breakdown.total as f64 / self.baseline_params as f64 - 1.0)
        )?;
        writeln!(
            f,
            "estimator (training only): {} parameters",
            self.estimator_params
        )?;
        if let Some(us) = self.convert_micros {
            writeln!(f, "128-frame conversion: {:.1} ms", us as f64 / 1000.0)?;
        }
        Ok(())
    }
}
