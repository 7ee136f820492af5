//! Dataset preparation and access: directory scan, feature cache,
//! manifest with normalization statistics, and pair sampling.
//!
//! Layout on disk: one manifest.jsonl whose first line holds the
//! feature configuration plus per-bin mean/std, followed by one JSON
//! line per utterance sorted by (speaker, utterance). Features live
//! in a cache/ directory next to the manifest as little-endian f32.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use vconv_core::{Scalar, Tensor, TrainingPair};

use crate::mel::{logmel, normalize_mel, MelConfig};
use crate::resample::resample;
use crate::wav::load_waveform;
use crate::{Error, Result};

const CACHE_MAGIC: &[u8; 8] = b"VMELCA\x01\0";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestHeader {
    mel: MelConfig,
    norm_mean: Vec<f64>,
    norm_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub speaker_id: String,
    pub utterance_id: String,
    /// Source audio this entry was derived from.
    pub path: String,
    /// Feature cache file, relative to the manifest.
    pub cache: String,
    pub n_frames: usize,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub mel: MelConfig,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let header = ManifestHeader {
            mel: self.mel.clone(),
            norm_mean: self.norm_mean.clone(),
            norm_std: self.norm_std.clone(),
        };
        out.push_str(&serde_json::to_string(&header).expect("header serializes"));
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = match lines.next() {
            Some(l) => l.map_err(|e| Error::io(path, e))?,
            None => {
                return Err(Error::Corrupt {
                    path: path.to_path_buf(),
                    reason: "empty manifest".into(),
                })
            }
        };
        let header: ManifestHeader =
            serde_json::from_str(&header_line).map_err(|e| Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("bad header line: {e}"),
            })?;
        let mut entries = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry =
                serde_json::from_str(&line).map_err(|e| Error::Corrupt {
                    path: path.to_path_buf(),
                    reason: format!("bad entry line: {e}"),
                })?;
            entries.push(entry);
        }
        let m = Manifest {
            mel: header.mel,
            norm_mean: header.norm_mean,
            norm_std: header.norm_std,
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        if self.norm_mean.len() != self.mel.n_mels || self.norm_std.len() != self.mel.n_mels {
            return Err(Error::Format(format!(
                "normalization statistics cover {} bins, features have {}",
                self.norm_mean.len(),
                self.mel.n_mels
            )));
        }
        if self.norm_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Format("non-positive normalization std".into()));
        }
        for w in self.entries.windows(2) {
            let a = (&w[0].speaker_id, &w[0].utterance_id);
            let b = (&w[1].speaker_id, &w[1].utterance_id);
            if a >= b {
                return Err(Error::Format(format!(
                    "entries must be strictly sorted by (speaker, utterance); \
                     {}/{} follows {}/{}",
                    w[1].speaker_id, w[1].utterance_id, w[0].speaker_id, w[0].utterance_id
                )));
            }
        }
        Ok(())
    }
}

pub fn write_mel_cache(path: &Path, mel: &Tensor<f32>, config_hash: u64) -> Result<()> {
    let shape = mel.shape();
    let mut buf = Vec::with_capacity(24 + mel.data().len() * 4);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&config_hash.to_le_bytes());
    buf.extend_from_slice(&(shape[0] as u32).to_le_bytes());
    buf.extend_from_slice(&(shape[1] as u32).to_le_bytes());
    for v in mel.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a feature file without checking which configuration produced
/// it; the stored hash comes back alongside the data.
pub fn read_mel_cache_raw(path: &Path) -> Result<(Tensor<f32>, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if bytes.len() < 24 {
        return Err(corrupt("file shorter than the header"));
    }
    if &bytes[..8] != CACHE_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let hash = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let n_mels = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let frames = u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as usize;
    let payload = n_mels
        .checked_mul(frames)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(24));
    if payload != Some(bytes.len()) {
        return Err(corrupt("payload size does not match the header"));
    }
    let mut t = Tensor::zeros(&[n_mels, frames]);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        let o = 24 + i * 4;
        *v = f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    }
    Ok((t, hash))
}

pub fn read_mel_cache(path: &Path, config_hash: u64) -> Result<Tensor<f32>> {
    let (t, hash) = read_mel_cache_raw(path)?;
    if hash != config_hash {
        return Err(Error::ConfigMismatch(format!(
            "cache {} was built under a different feature configuration",
            path.display()
        )));
    }
    Ok(t)
}

fn sorted_dir(root: &Path, dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() == dirs {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Scans `root` (one subdirectory per speaker, WAV files inside),
/// extracts features into `out_dir/cache`, accumulates per-bin
/// statistics, and writes `out_dir/manifest.jsonl`.
///
/// Utterances too short for a single analysis window are skipped with
/// a warning, as are speakers left with fewer than two usable
/// utterances (they load fine but cannot participate in pairing).
pub fn build_manifest(root: &Path, out_dir: &Path, mel: &MelConfig) -> Result<Manifest> {
    mel.validate()?;
    let cache_dir = out_dir.join("cache");
    fs::create_dir_all(&cache_dir).map_err(|e| Error::io(&cache_dir, e))?;
    let hash = mel.hash();

    let n = mel.n_mels;
    let (mut sum, mut sumsq) = (vec![0.0f64; n], vec![0.0f64; n]);
    let mut count = 0usize;
    let mut entries = Vec::new();
    let mut per_speaker = Vec::new();

    for spk_dir in sorted_dir(root, true)? {
        let speaker_id = file_stem(&spk_dir);
        let mut usable = 0usize;
        for wav_path in sorted_dir(&spk_dir, false)? {
            let is_wav = wav_path
                .extension()
                .map(|e| e.eq_ignore_ascii_case("wav"))
                .unwrap_or(false);
            if !is_wav {
                continue;
            }
            let utterance_id = file_stem(&wav_path);
            let wave = load_waveform(&wav_path)?;
            let wave = resample(&wave, mel.sample_rate)?;
            let feats = match logmel(&wave, mel) {
                Ok(f) => f,
                Err(Error::TooShort(_)) => {
                    eprintln!(
                        "warning: skipping {} ({:.3}s is shorter than one analysis window)",
                        wav_path.display(),
                        wave.duration_secs()
                    );
                    continue;
                }
                Err(e) => return Err(e),
            };
            let frames = feats.frames();
            for m in 0..n {
                for t in 0..frames {
                    let v = feats.values.data()[m * frames + t];
                    sum[m] += v;
                    sumsq[m] += v * v;
                }
            }
            count += frames;

            let cache_name = format!("{speaker_id}__{utterance_id}.melc");
            write_mel_cache(&cache_dir.join(&cache_name), &feats.to_f32(), hash)?;
            entries.push(ManifestEntry {
                speaker_id: speaker_id.clone(),
                utterance_id,
                path: wav_path.to_string_lossy().into_owned(),
                cache: format!("cache/{cache_name}"),
                n_frames: frames,
            });
            usable += 1;
        }
        per_speaker.push((speaker_id, usable));
    }

    if count == 0 {
        return Err(Error::Format(format!(
            "no usable audio found under {}",
            root.display()
        )));
    }
    for (speaker, usable) in &per_speaker {
        if *usable < 2 {
            eprintln!(
                "warning: speaker {speaker} has {usable} usable utterance(s); \
                 pairing needs at least two"
            );
        }
    }

    let mut norm_mean = vec![0.0f64; n];
    let mut norm_std = vec![0.0f64; n];
    for m in 0..n {
        let mu = sum[m] / count as f64;
        let var = (sumsq[m] / count as f64 - mu * mu).max(1e-12);
        norm_mean[m] = mu;
        norm_std[m] = var.sqrt();
    }

    entries.sort_by(|a, b| {
        (&a.speaker_id, &a.utterance_id).cmp(&(&b.speaker_id, &b.utterance_id))
    });
    let manifest = Manifest {
        mel: mel.clone(),
        norm_mean,
        norm_std,
        entries,
    };
    manifest.validate()?;
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Manifest plus every cached feature matrix resident in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    /// Parallel to `manifest.entries`.
    pub mels: Vec<Tensor<f32>>,
    normalized: bool,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Dataset> {
        let manifest = Manifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let hash = manifest.mel.hash();
        let mut mels = Vec::with_capacity(manifest.entries.len());
        for entry in &manifest.entries {
            let mel = read_mel_cache(&base.join(&entry.cache), hash)?;
            if mel.shape() != [manifest.mel.n_mels, entry.n_frames] {
                return Err(Error::Corrupt {
                    path: base.join(&entry.cache),
                    reason: format!(
                        "cache shape {:?} disagrees with the manifest ({} x {})",
                        mel.shape(),
                        manifest.mel.n_mels,
                        entry.n_frames
                    ),
                });
            }
            mels.push(mel);
        }
        Ok(Dataset {
            manifest,
            mels,
            normalized: false,
        })
    }

    /// Applies the manifest statistics to every feature matrix once.
    pub fn normalize(&mut self) {
        assert!(!self.normalized, "dataset already normalized");
        for mel in &mut self.mels {
            normalize_mel(mel, &self.manifest.norm_mean, &self.manifest.norm_std);
        }
        self.normalized = true;
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

/// A single sampling decision, before any features are copied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairDraw {
    pub speaker: usize,
    /// Entry indices into the manifest; always distinct.
    pub utt_a: usize,
    pub utt_b: usize,
    pub off_a: usize,
    pub off_b: usize,
}

/// Uniform speaker, two distinct utterances of that speaker, then an
/// independent uniform crop offset in each.
#[derive(Debug, Clone)]
pub struct PairSampler {
    groups: Vec<Vec<usize>>,
    crop: usize,
}

impl PairSampler {
    pub fn new(ds: &Dataset, crop: usize) -> Result<PairSampler> {
        if crop == 0 {
            return Err(Error::Config("crop length must be > 0".into()));
        }
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut current: Option<(&str, Vec<usize>)> = None;
        for (i, e) in ds.manifest.entries.iter().enumerate() {
            if e.n_frames < crop {
                continue;
            }
            match &mut current {
                Some((spk, idxs)) if *spk == e.speaker_id => idxs.push(i),
                _ => {
                    if let Some((_, idxs)) = current.take() {
                        groups.push(idxs);
                    }
                    current = Some((&e.speaker_id, vec![i]));
                }
            }
        }
        if let Some((_, idxs)) = current {
            groups.push(idxs);
        }
        groups.retain(|g| g.len() >= 2);
        if groups.is_empty() {
            return Err(Error::NoEligibleSpeaker);
        }
        Ok(PairSampler { groups, crop })
    }

    pub fn crop(&self) -> usize {
        self.crop
    }

    pub fn n_speakers(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, speaker: usize) -> &[usize] {
        &self.groups[speaker]
    }

    pub fn draw_indices<R: Rng>(&self, ds: &Dataset, rng: &mut R) -> PairDraw {
        let speaker = rng.gen_range(0..self.groups.len());
        let group = &self.groups[speaker];
        let a = rng.gen_range(0..group.len());
        let mut b = rng.gen_range(0..group.len() - 1);
        if b >= a {
            b += 1;
        }
        let (utt_a, utt_b) = (group[a], group[b]);
        let slack_a = ds.manifest.entries[utt_a].n_frames - self.crop;
        let slack_b = ds.manifest.entries[utt_b].n_frames - self.crop;
        PairDraw {
            speaker,
            utt_a,
            utt_b,
            off_a: rng.gen_range(0..slack_a + 1),
            off_b: rng.gen_range(0..slack_b + 1),
        }
    }

    pub fn materialize<T: Scalar>(&self, ds: &Dataset, draw: &PairDraw) -> TrainingPair<T> {
        TrainingPair {
            mel: crop_cast(&ds.mels[draw.utt_a], draw.off_a, self.crop),
            sibling: crop_cast(&ds.mels[draw.utt_b], draw.off_b, self.crop),
        }
    }

    pub fn draw<T: Scalar, R: Rng>(&self, ds: &Dataset, rng: &mut R) -> TrainingPair<T> {
        let d = self.draw_indices(ds, rng);
        self.materialize(ds, &d)
    }

    pub fn draw_batch<T: Scalar, R: Rng>(
        &self,
        ds: &Dataset,
        batch: usize,
        rng: &mut R,
    ) -> Vec<TrainingPair<T>> {
        (0..batch).map(|_| self.draw(ds, rng)).collect()
    }
}

fn crop_cast<T: Scalar>(mel: &Tensor<f32>, off: usize, len: usize) -> Tensor<T> {
    let frames = mel.shape()[1];
    let rows = mel.shape()[0];
    let mut out = Tensor::zeros(&[rows, len]);
    for r in 0..rows {
        for c in 0..len {
            out.data_mut()[r * len + c] = T::from_f64(mel.data()[r * frames + off + c] as f64);
        }
    }
    out
}
