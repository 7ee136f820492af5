//! Command-line surface. Parsing stays here; each subcommand maps to
//! one library call plus printing.

use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use vconv_core::{Ablation, Tensor};

use crate::checkpoint::load_checkpoint;
use crate::convert::{convert_paths, write_conversion};
use crate::dataset::{build_manifest, read_mel_cache_raw, Dataset};
use crate::mcd::mcd;
use crate::mel::{logmel, MelConfig};
use crate::report::{export_tsv, extract_embeddings, model_report, separation_report};
use crate::runner::{run_training, RunConfig};
use crate::wav::load_waveform;
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "vconv",
    version,
    about = "One-shot voice conversion: train, convert, evaluate"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    Full,
    NoMi,
    NoLowerBound,
    NoSiamese,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Ablation {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::NoMi => Ablation::NoMi,
            AblationArg::NoLowerBound => Ablation::NoLowerBound,
            AblationArg::NoSiamese => Ablation::NoSiamese,
        }
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Scan a speaker-per-subdirectory tree of WAV files, extract
    /// features, and write a manifest with normalization statistics.
    Prepare {
        /// Directory containing one subdirectory per speaker.
        #[arg(long)]
        root: PathBuf,
        /// Output directory for manifest.jsonl and the feature cache.
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON file overriding the feature configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train from a prepared manifest.
    Train {
        /// Run configuration JSON ({"model": .., "train": .., "mel": ..}).
        #[arg(long)]
        config: PathBuf,
        /// manifest.jsonl produced by `prepare`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for logs and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the configured ablation.
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
    },
    /// Convert one utterance to the voice of a single target
    /// utterance.
    Convert {
        #[arg(long)]
        ckpt: PathBuf,
        /// Utterance supplying the content.
        #[arg(long)]
        source: PathBuf,
        /// Utterance supplying the voice.
        #[arg(long)]
        target: PathBuf,
        /// Output path: a feature file, or a WAV with --audio.
        #[arg(long)]
        out: PathBuf,
        /// Also run phase reconstruction and write audio.
        #[arg(long)]
        audio: bool,
        /// Phase estimation iterations.
        #[arg(long, default_value_t = 32)]
        gl_iters: usize,
    },
    /// Mel-cepstral distortion between two utterances or feature
    /// files (both sides must share one feature configuration).
    EvalMcd {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        converted: PathBuf,
        /// Score frame-by-frame instead of time-warping first.
        #[arg(long)]
        no_dtw: bool,
    },
    /// Embed every utterance of a dataset and export the vectors.
    ExportEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        /// manifest.jsonl produced by `prepare`.
        #[arg(long)]
        data: PathBuf,
        /// TSV output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter accounting and a timed conversion for a checkpoint.
    Info {
        #[arg(long)]
        ckpt: PathBuf,
        /// Skip the timed 128-frame conversion.
        #[arg(long)]
        no_timing: bool,
    },
}

fn load_features(path: &PathBuf) -> Result<(Tensor<f64>, u64)> {
    let is_wav = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("wav"))
        .unwrap_or(false);
    if is_wav {
        let cfg = MelConfig::default();
        let wave = load_waveform(path)?;
        let wave = crate::resample::resample(&wave, cfg.sample_rate)?;
        Ok((logmel(&wave, &cfg)?.values, cfg.hash()))
    } else {
        let (t, hash) = read_mel_cache_raw(path)?;
        Ok((t.cast(), hash))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { root, out, config } => {
            let mel = match config {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    serde_json::from_str(&text)
                        .map_err(|e| Error::Format(format!("feature config {}: {e}", p.display())))?
                }
                None => MelConfig::default(),
            };
            let manifest = build_manifest(&root, &out, &mel)?;
            println!(
                "prepared {} utterances into {}",
                manifest.entries.len(),
                out.join("manifest.jsonl").display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            resume,
            ablation,
        } => {
            let mut run_cfg = RunConfig::load(&config)?;
            if let Some(a) = ablation {
                run_cfg.train.ablation = a.into();
            }
            let summary = run_training(&run_cfg, &data, &out, resume.as_deref())?;
            println!(
                "finished at step {}; latest checkpoint: {}",
                summary.steps_completed,
                summary.latest_checkpoint.display()
            );
        }
        Command::Convert {
            ckpt,
            source,
            target,
            out,
            audio,
            gl_iters,
        } => {
            let conv = convert_paths(&ckpt, &source, &target)?;
            write_conversion(&conv, &out, audio, gl_iters)?;
            println!(
                "wrote {} ({} frames)",
                out.display(),
                conv.mel_norm.shape()[1]
            );
        }
        Command::EvalMcd {
            reference,
            converted,
            no_dtw,
        } => {
            let (r, rh) = load_features(&reference)?;
            let (c, ch) = load_features(&converted)?;
            if rh != ch {
                return Err(Error::ConfigMismatch(
                    "reference and converted features come from different configurations".into(),
                ));
            }
            let value = mcd(&r, &c, !no_dtw)?;
            println!("MCD: {value:.4} dB");
        }
        Command::ExportEmbeddings { ckpt, data, out } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let mut ds = Dataset::load(&data)?;
            if ds.manifest.mel != ckpt.mel
                || ds.manifest.norm_mean != ckpt.norm_mean
                || ds.manifest.norm_std != ckpt.norm_std
            {
                return Err(Error::ConfigMismatch(
                    "dataset features or statistics disagree with the checkpoint".into(),
                ));
            }
            ds.normalize();
            let set = extract_embeddings(&ckpt.state.model, &ds)?;
            export_tsv(&set, &out)?;
            println!("wrote {} embeddings to {}", set.vectors.len(), out.display());
            match separation_report(&set) {
                Ok(rep) => println!(
                    "speakers {}  intra {:.4}  inter {:.4}  silhouette {:.4}",
                    rep.n_speakers, rep.intra_mean, rep.inter_mean, rep.silhouette
                ),
                Err(e) => eprintln!("separation not computed: {e}"),
            }
        }
        Command::Info { ckpt, no_timing } => {
            let ckpt = load_checkpoint(&ckpt)?;
            print!("{}", model_report(&ckpt, !no_timing)?);
        }
    }
    Ok(())
}
