//! Training driver: wires the dataset, pair sampler, and the core
//! training iteration together, with JSONL loss logging and periodic
//! checkpoints.
//!
//! Batches are drawn from a throwaway RNG reseeded from
//! (seed, step) every step, so a resumed run sees exactly the batches
//! the uninterrupted run would have seen.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use vconv_core::{LossReport, ModelConfig, TrainConfig, TrainState};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dataset::{Dataset, PairSampler};
use crate::mel::MelConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mel: MelConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!(
            "run config {}: {e}",
            path.display()
        )))
    }
}

/// Fields a resume may legitimately change: how long to keep going
/// and how often to report. Everything else must match the checkpoint.
fn same_hyperparameters(a: &TrainConfig, b: &TrainConfig) -> bool {
    let mut a = a.clone();
    a.total_steps = b.total_steps;
    a.log_every = b.log_every;
    a.checkpoint_every = b.checkpoint_every;
    a == *b
}

fn batch_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x0100_0000_01B3).wrapping_add(step))
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps_completed: u64,
    pub last_report: Option<LossReport>,
    pub log_path: PathBuf,
    pub latest_checkpoint: PathBuf,
}

pub fn run_training(
    run: &RunConfig,
    manifest_path: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<RunSummary> {
    run.train.validate().map_err(Error::Core)?;
    run.model.validate().map_err(Error::Core)?;
    run.mel.validate()?;
    if run.model.n_mels != run.mel.n_mels {
        return Err(Error::Config(format!(
            "model expects {} mel bins, features produce {}",
            run.model.n_mels, run.mel.n_mels
        )));
    }
    if run.train.crop_frames < run.model.min_frames() {
        return Err(Error::Config(format!(
            "crop of {} frames is below the model minimum of {}",
            run.train.crop_frames,
            run.model.min_frames()
        )));
    }

    let mut ds = Dataset::load(manifest_path)?;
    if ds.manifest.mel != run.mel {
        return Err(Error::ConfigMismatch(
            "manifest was built under a different feature configuration".into(),
        ));
    }
    ds.normalize();
    let sampler = PairSampler::new(&ds, run.train.crop_frames)?;
    let norm_mean = ds.manifest.norm_mean.clone();
    let norm_std = ds.manifest.norm_std.clone();

    let mut state = match resume {
        None => TrainState::<f32>::new(run.model.clone(), run.train.clone())?,
        Some(ckpt_path) => {
            let ckpt = load_checkpoint(ckpt_path)?;
            if ckpt.state.model.config != run.model {
                return Err(Error::ConfigMismatch(
                    "checkpoint was trained with a different model configuration".into(),
                ));
            }
            if !same_hyperparameters(&ckpt.state.config, &run.train) {
                return Err(Error::ConfigMismatch(
                    "checkpoint was trained with different hyperparameters".into(),
                ));
            }
            if ckpt.mel != run.mel || ckpt.norm_mean != norm_mean || ckpt.norm_std != norm_std {
                return Err(Error::ConfigMismatch(
                    "checkpoint features or statistics disagree with the manifest".into(),
                ));
            }
            let mut state = ckpt.state;
            state.config = run.train.clone();
            state
        }
    };

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let latest = out_dir.join("latest.ckpt");

    let total = run.train.total_steps;
    let mut last_report = None;
    let mut consecutive_failures = 0u32;
    while state.step < total {
        let mut rng = batch_rng(run.train.seed, state.step);
        let batch = sampler.draw_batch::<f32, _>(&ds, run.train.batch_size, &mut rng);
        let report = state.train_step(&batch)?;

        if !report.stepped {
            consecutive_failures += 1;
            eprintln!(
                "warning: step {} produced a non-finite loss; parameters left untouched \
                 ({consecutive_failures} in a row)",
                report.step
            );
            if consecutive_failures >= 10 {
                return Err(Error::Training(format!(
                    "aborting after {consecutive_failures} consecutive non-finite steps"
                )));
            }
            continue;
        }
        consecutive_failures = 0;

        let is_last = report.step + 1 == total;
        if run.train.log_every > 0 && (report.step % run.train.log_every == 0 || is_last) {
            let line = serde_json::to_string(&report).expect("report serializes");
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            println!(
                "step {}/{} recon {:.4} kl {:.4} siam {:.4} mi {:.4} total {:.4}",
                report.step + 1,
                total,
                report.recon,
                report.kl,
                report.siamese,
                report.mi,
                report.total
            );
        }
        if run.train.checkpoint_every > 0 && state.step % run.train.checkpoint_every == 0 {
            let periodic = out_dir.join(format!("step_{:08}.ckpt", state.step));
            save_checkpoint(&periodic, &state, &run.mel, &norm_mean, &norm_std)?;
            save_checkpoint(&latest, &state, &run.mel, &norm_mean, &norm_std)?;
        }
        last_report = Some(report);
    }
    save_checkpoint(&latest, &state, &run.mel, &norm_mean, &norm_std)?;

    Ok(RunSummary {
        steps_completed: state.step,
        last_report,
        log_path,
        latest_checkpoint: latest,
    })
}
