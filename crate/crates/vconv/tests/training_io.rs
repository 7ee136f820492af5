//! Checkpoint format and training-runner behavior: byte-stable
//! serialization, bitwise resume, config refusal, and log output.

use std::fs;
use std::path::Path;

use tempfile::tempdir;
use vconv::checkpoint::{load_checkpoint, save_checkpoint};
use vconv::dataset::build_manifest;
use vconv::mel::MelConfig;
use vconv::runner::{run_training, RunConfig};
use vconv::synth::write_corpus;
use vconv::Error;
use vconv_core::{Ablation, LossReport, ModelConfig, TrainConfig};

fn smoke_run(seed: u64, total: u64) -> RunConfig {
    RunConfig {
        model: ModelConfig::smoke(),
        train: TrainConfig {
            seed,
            batch_size: 2,
            total_steps: total,
            inner_steps: 1,
            warmup_steps: 4,
            lr_model: 1e-3,
            lr_cmi: 1e-3,
            mi_hidden: 8,
            ablation: Ablation::Full,
            crop_frames: 24,
            log_every: 1,
            checkpoint_every: 0,
        },
        mel: MelConfig {
            n_mels: 20,
            ..MelConfig::default()
        },
    }
}

/// Corpus + manifest under one tempdir; returns the manifest path.
fn prepared(dir: &Path, mel: &MelConfig) -> std::path::PathBuf {
    let root = dir.join("audio");
    let out = dir.join("prepared");
    write_corpus(&root, 2, 3, 0.7, 16_000).unwrap();
    build_manifest(&root, &out, mel).unwrap();
    out.join("manifest.jsonl")
}

fn read_log(path: &Path) -> Vec<LossReport> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn checkpoint_survives_a_load_save_cycle_byte_for_byte() {
    let dir = tempdir().unwrap();
    let run = smoke_run(5, 2);
    let manifest = prepared(dir.path(), &run.mel);
    let summary = run_training(&run, &manifest, &dir.path().join("out"), None).unwrap();

    let original = fs::read(&summary.latest_checkpoint).unwrap();
    let ckpt = load_checkpoint(&summary.latest_checkpoint).unwrap();
    let copy_path = dir.path().join("copy.ckpt");
    save_checkpoint(&copy_path, &ckpt.state, &ckpt.mel, &ckpt.norm_mean, &ckpt.norm_std).unwrap();
    assert_eq!(fs::read(&copy_path).unwrap(), original);
    assert_eq!(ckpt.state.step, 2);
}

#[test]
fn resume_reproduces_the_uninterrupted_run_bitwise() {
    let dir = tempdir().unwrap();
    let run_full = smoke_run(9, 8);
    let manifest = prepared(dir.path(), &run_full.mel);

    let out_a = dir.path().join("a");
    let a = run_training(&run_full, &manifest, &out_a, None).unwrap();

    let out_b = dir.path().join("b");
    let run_half = smoke_run(9, 4);
    let b_half = run_training(&run_half, &manifest, &out_b, None).unwrap();
    assert_eq!(b_half.steps_completed, 4);
    let b = run_training(
        &run_full,
        &manifest,
        &out_b,
        Some(&b_half.latest_checkpoint),
    )
    .unwrap();

    assert_eq!(a.steps_completed, 8);
    assert_eq!(b.steps_completed, 8);
    assert_eq!(
        fs::read(&a.latest_checkpoint).unwrap(),
        fs::read(&b.latest_checkpoint).unwrap(),
        "resumed checkpoint diverged from the continuous run"
    );
    // The interrupted log, plus its continuation, is the continuous
    // log line for line.
    assert_eq!(read_log(&a.log_path), read_log(&b.log_path));
}

#[test]
fn defaced_checkpoints_are_rejected() {
    let dir = tempdir().unwrap();
    let run = smoke_run(3, 2);
    let manifest = prepared(dir.path(), &run.mel);
    let summary = run_training(&run, &manifest, &dir.path().join("out"), None).unwrap();
    let path = &summary.latest_checkpoint;
    let bytes = fs::read(path).unwrap();

    let truncated = dir.path().join("trunc.ckpt");
    fs::write(&truncated, &bytes[..bytes.len() - 10]).unwrap();
    match load_checkpoint(&truncated) {
        Err(e @ Error::Corrupt { .. }) => assert_eq!(e.exit_code(), 3),
        other => panic!("expected Corrupt, got {:?}", other.err()),
    }

    let defaced = dir.path().join("magic.ckpt");
    let mut evil = bytes.clone();
    evil[0] ^= 0xFF;
    fs::write(&defaced, &evil).unwrap();
    assert!(matches!(load_checkpoint(&defaced), Err(Error::Corrupt { .. })));
}

#[test]
fn resume_refuses_a_different_configuration() {
    let dir = tempdir().unwrap();
    let run = smoke_run(7, 2);
    let manifest = prepared(dir.path(), &run.mel);
    let summary = run_training(&run, &manifest, &dir.path().join("out"), None).unwrap();
    let ckpt = summary.latest_checkpoint;

    // Longer run, same everything else: the one change resume exists
    // for.
    let extended = smoke_run(7, 3);
    run_training(&extended, &manifest, &dir.path().join("out2"), Some(&ckpt)).unwrap();

    let mut wider = smoke_run(7, 4);
    wider.model.enc_width = 24;
    match run_training(&wider, &manifest, &dir.path().join("w"), Some(&ckpt)) {
        Err(e @ Error::ConfigMismatch(_)) => assert_eq!(e.exit_code(), 3),
        other => panic!("expected ConfigMismatch, got {:?}", other.err()),
    }

    let mut hotter = smoke_run(7, 4);
    hotter.train.lr_model = 5e-3;
    assert!(matches!(
        run_training(&hotter, &manifest, &dir.path().join("h"), Some(&ckpt)),
        Err(Error::ConfigMismatch(_))
    ));

    let mut refeatured = smoke_run(7, 4);
    refeatured.mel.fmax = 7_000.0;
    assert!(matches!(
        run_training(&refeatured, &manifest, &dir.path().join("f"), Some(&ckpt)),
        Err(Error::ConfigMismatch(_))
    ));
}

#[test]
fn runner_emits_parseable_logs_and_periodic_checkpoints() {
    let dir = tempdir().unwrap();
    let mut run = smoke_run(1, 5);
    run.train.log_every = 2;
    run.train.checkpoint_every = 2;
    let manifest = prepared(dir.path(), &run.mel);
    let out = dir.path().join("out");
    let summary = run_training(&run, &manifest, &out, None).unwrap();
    assert_eq!(summary.steps_completed, 5);

    assert!(out.join("step_00000002.ckpt").is_file());
    assert!(out.join("step_00000004.ckpt").is_file());
    assert!(out.join("latest.ckpt").is_file());

    let log = read_log(&summary.log_path);
    let steps: Vec<u64> = log.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 2, 4]);
    for r in &log {
        assert!(r.stepped);
        assert!(r.total.is_finite());
        assert!(r.recon.is_finite());
    }
    assert_eq!(summary.last_report.unwrap(), *log.last().unwrap());

    let ckpt = load_checkpoint(&out.join("step_00000004.ckpt")).unwrap();
    assert_eq!(ckpt.state.step, 4);
    assert_eq!(ckpt.norm_mean.len(), 20);
}
