use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::{kl_loss, lambda_schedule, recon_loss, LossReport};
use crate::mi::{Estimator, MiConfig, MiEstimates};
use crate::model::{siamese_loss, Model, ModelConfig, SiameseSide, SpeakerCodeVars};
use crate::scalar::Scalar;
use crate::shuffle::chunk_permutation;
use crate::tensor::Tensor;

/// One training example: two segments of the same speaker. `mel`
/// drives reconstruction (its shuffle feeds the main speaker
/// encoder); `sibling` feeds the weight-shared twin for the cosine
/// pull.
#[derive(Debug, Clone)]
pub struct TrainingPair<T: Scalar> {
    pub mel: Tensor<T>,
    pub sibling: Tensor<T>,
}

/// Which pieces of the full objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Everything on.
    Full,
    /// No MI estimator at all: λ3 = 0, estimator never trains.
    NoMi,
    /// Estimator trains the conditional density only (no statistics
    /// net, no ordering hinge).
    NoLowerBound,
    /// No Siamese pull and no time shuffle: λ2 = 0, identity frame
    /// order into the speaker encoder.
    NoSiamese,
}

/// Training-loop knobs. Defaults mirror the training recipe: batches
/// of 8 pairs, 5 estimator steps per outer step, 20000-step ramp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub inner_steps: usize,
    pub warmup_steps: u64,
    pub lr_model: f64,
    pub lr_cmi: f64,
    pub mi_hidden: usize,
    pub ablation: Ablation,
    /// Frames per training crop.
    pub crop_frames: usize,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 8,
            total_steps: 100_000,
            inner_steps: 5,
            warmup_steps: 20_000,
            lr_model: 1e-4,
            lr_cmi: 2e-4,
            mi_hidden: 64,
            ablation: Ablation::Full,
            crop_frames: 128,
            log_every: 50,
            checkpoint_every: 5_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "batch_size must be ≥ 2 (marginal sampling needs it)".into(),
            ));
        }
        if self.inner_steps < 1 {
            return Err(Error::InvalidConfig("inner_steps must be ≥ 1".into()));
        }
        if self.crop_frames < 2 {
            return Err(Error::InvalidConfig("crop_frames must be ≥ 2".into()));
        }
        Ok(())
    }
}

/// Everything that evolves during training. The std layer serializes
/// this wholesale for checkpoints.
pub struct TrainState<T: Scalar> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub estimator: Estimator<T>,
    pub opt_model: AdamState<T>,
    pub opt_cmi: AdamState<T>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

/// Gradient-isolation probes from an instrumented step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IsolationProbe {
    /// Conversion-path parameters were bit-identical across Phase 1.
    pub model_frozen_in_phase1: bool,
    /// Estimator parameters were bit-identical across Phase 2.
    pub estimator_frozen_in_phase2: bool,
    /// No gradient reached any frozen estimator leaf in the Phase 2
    /// graph.
    pub no_grad_on_frozen_estimator: bool,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model_config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(model_config.clone(), &mut rng)?;
        let speaker_dim = 2 * model_config.n_adain_layers * model_config.dec_width;
        let mut mi_config = MiConfig::new(model_config.content_channels, speaker_dim, config.mi_hidden);
        if config.ablation == Ablation::NoLowerBound {
            mi_config.use_lower = false;
        }
        let estimator = Estimator::new(mi_config, &mut rng)?;
        let opt_model = AdamState::new(AdamConfig::with_lr(config.lr_model), &model.params);
        let opt_cmi = AdamState::new(AdamConfig::with_lr(config.lr_cmi), &estimator.params);
        Ok(TrainState {
            config,
            model,
            estimator,
            opt_model,
            opt_cmi,
            step: 0,
            rng,
        })
    }

    fn check_batch(&self, batch: &[TrainingPair<T>]) -> Result<()> {
        if batch.len() < 2 {
            return Err(Error::InvalidConfig("batch must contain ≥ 2 pairs".into()));
        }
        let want_c = self.model.config.n_mels;
        for p in batch {
            for t in [&p.mel, &p.sibling] {
                let s = t.shape();
                if s.len() != 2 || s[0] != want_c {
                    return Err(Error::ShapeMismatch(format!(
                        "training segment {s:?}, expected [{want_c} × T]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Flattens per-layer (α, β) into the single condition column the
    /// estimator scores.
    fn flatten_code(g: &mut Graph<T>, code: &SpeakerCodeVars) -> Result<Var> {
        let mut parts: Vec<Var> = Vec::with_capacity(code.alpha.len() + code.beta.len());
        parts.extend_from_slice(&code.alpha);
        parts.extend_from_slice(&code.beta);
        g.concat_rows(&parts)
    }

    /// Detached (content, condition) values for the estimator phase.
    fn detached_codes(
        &mut self,
        batch: &[TrainingPair<T>],
        perms: &[Vec<usize>],
    ) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, false);
        let mut zc = Vec::with_capacity(batch.len());
        let mut zs = Vec::with_capacity(batch.len());
        for (pair, perm) in batch.iter().zip(perms) {
            let mel = g.constant(pair.mel.clone());
            let content = self.model.content_encode(&mut g, &bound, mel)?;
            let shuffled = g.gather_cols(mel, perm)?;
            let (_, code) = self
                .model
                .speaker_encode(&mut g, &bound, shuffled, SiameseSide::Main)?;
            let flat = Self::flatten_code(&mut g, &code)?;
            zc.push(g.value(content).clone());
            zs.push(g.value(flat).clone());
        }
        Ok((zc, zs))
    }

    /// One full two-phase iteration. Phase 1 tightens the estimator
    /// on detached codes; Phase 2 takes one model step against the
    /// frozen estimator.
    pub fn train_step(&mut self, batch: &[TrainingPair<T>]) -> Result<LossReport> {
        self.train_step_impl(batch, None)
    }

    /// `train_step` plus parameter-freeze and gradient-absence
    /// assertions, for tests that verify phase isolation.
    pub fn train_step_instrumented(
        &mut self,
        batch: &[TrainingPair<T>],
    ) -> Result<(LossReport, IsolationProbe)> {
        let mut probe = IsolationProbe {
            model_frozen_in_phase1: false,
            estimator_frozen_in_phase2: false,
            no_grad_on_frozen_estimator: false,
        };
        let report = self.train_step_impl(batch, Some(&mut probe))?;
        Ok((report, probe))
    }

    fn snapshot(params: &crate::params::ParamSet<T>) -> Vec<Vec<T>> {
        params.iter().map(|(_, _, t)| t.data().to_vec()).collect()
    }

    fn train_step_impl(
        &mut self,
        batch: &[TrainingPair<T>],
        mut probe: Option<&mut IsolationProbe>,
    ) -> Result<LossReport> {
        self.check_batch(batch)?;
        let n = batch.len();
        let ablation = self.config.ablation;

        // Chunk permutations are drawn once per pair and shared by
        // both phases, keeping the rng stream identical whether or
        // not instrumentation is on.
        let perms: Vec<Vec<usize>> = batch
            .iter()
            .map(|p| {
                let frames = p.mel.shape()[1];
                if ablation == Ablation::NoSiamese {
                    (0..frames).collect()
                } else {
                    chunk_permutation(frames, self.model.config.ts_chunk, &mut self.rng)
                }
            })
            .collect();
        let inner_seeds: Vec<u64> = (0..self.config.inner_steps).map(|_| self.rng.gen()).collect();

        // ── Phase 1: estimator steps on detached codes ──
        let mut mi_est: Option<MiEstimates> = None;
        if ablation != Ablation::NoMi {
            let (zc, zs) = self.detached_codes(batch, &perms)?;
            let model_before = probe.as_ref().map(|_| Self::snapshot(&self.model.params));
            for &seed in &inner_seeds {
                let rep = self.estimator.cmi_train_step(&zc, &zs, &mut self.opt_cmi, seed)?;
                mi_est = Some(rep.estimates);
            }
            if let Some(p) = probe.as_deref_mut() {
                let after = Self::snapshot(&self.model.params);
                p.model_frozen_in_phase1 = model_before.as_deref() == Some(&after[..]);
            }
        } else if let Some(p) = probe.as_deref_mut() {
            p.model_frozen_in_phase1 = true;
        }

        // ── Phase 2: one model step against the frozen estimator ──
        let (l1, l2, l3) = lambda_schedule(self.step, self.config.warmup_steps);
        let l2 = if ablation == Ablation::NoSiamese { 0.0 } else { l2 };
        let l3 = if ablation == Ablation::NoMi { 0.0 } else { l3 };

        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, true);
        let frozen_q = self.estimator.bind(&mut g, false);

        let mut recon_sum: Option<Var> = None;
        let mut kl_sum: Option<Var> = None;
        let mut siam_sum: Option<Var> = None;
        let mut zc_vars = Vec::with_capacity(n);
        let mut zs_vars = Vec::with_capacity(n);
        for (pair, perm) in batch.iter().zip(&perms) {
            let mel = g.constant(pair.mel.clone());
            let content = self.model.content_encode(&mut g, &bound, mel)?;
            let shuffled = g.gather_cols(mel, perm)?;
            let (emb_main, code) =
                self.model
                    .speaker_encode(&mut g, &bound, shuffled, SiameseSide::Main)?;
            let z_hat = self.model.decode(&mut g, &bound, content, &code)?;
            let r = recon_loss(&mut g, mel, z_hat)?;
            let k = kl_loss(&mut g, content)?;
            recon_sum = Some(match recon_sum {
                Some(acc) => g.add(acc, r)?,
                None => r,
            });
            kl_sum = Some(match kl_sum {
                Some(acc) => g.add(acc, k)?,
                None => k,
            });
            if ablation != Ablation::NoSiamese {
                let sib = g.constant(pair.sibling.clone());
                let (emb_sib, _) =
                    self.model
                        .speaker_encode(&mut g, &bound, sib, SiameseSide::Sibling)?;
                let s = siamese_loss(&mut g, emb_main, emb_sib)?;
                siam_sum = Some(match siam_sum {
                    Some(acc) => g.add(acc, s)?,
                    None => s,
                });
            }
            zc_vars.push(content);
            let flat = Self::flatten_code(&mut g, &code)?;
            zs_vars.push(flat);
        }
        let inv_n = T::from_f64(1.0 / n as f64);
        let recon = {
            let s = recon_sum.unwrap();
            g.affine(s, inv_n, T::zero())
        };
        let kl = {
            let s = kl_sum.unwrap();
            g.affine(s, inv_n, T::zero())
        };
        let siam = match siam_sum {
            Some(s) => g.affine(s, inv_n, T::zero()),
            None => g.constant(Tensor::scalar(T::zero())),
        };
        let mi = if ablation == Ablation::NoMi {
            g.constant(Tensor::scalar(T::zero()))
        } else {
            self.estimator.mi_loss(&mut g, &frozen_q, &zc_vars, &zs_vars)?
        };

        let w_kl = g.affine(kl, T::from_f64(l1), T::zero());
        let w_siam = g.affine(siam, T::from_f64(l2), T::zero());
        let w_mi = g.affine(mi, T::from_f64(l3), T::zero());
        let t1 = g.add(recon, w_kl)?;
        let t2 = g.add(t1, w_siam)?;
        let total = g.add(t2, w_mi)?;

        let report = LossReport {
            step: self.step,
            recon: g.value(recon).item().to_f64(),
            kl: g.value(kl).item().to_f64(),
            siamese: g.value(siam).item().to_f64(),
            mi: g.value(mi).item().to_f64(),
            total: g.value(total).item().to_f64(),
            lambda1: l1,
            lambda2: l2,
            lambda3: l3,
            mi_upper: mi_est.map(|e| e.upper).unwrap_or(0.0),
            mi_lower: mi_est.map(|e| e.lower).unwrap_or(0.0),
            stepped: true,
        };
        if !report.total.is_finite() {
            return Ok(LossReport {
                stepped: false,
                ..report
            });
        }

        let est_before = probe.as_ref().map(|_| Self::snapshot(&self.estimator.params));
        g.backward(total)?;
        if let Some(p) = probe.as_deref_mut() {
            p.no_grad_on_frozen_estimator = self
                .estimator
                .params
                .iter()
                .all(|(id, _, _)| g.grad(frozen_q.var(id)).is_none());
        }
        let grads = bound.grads(&g, &self.model.params);
        self.opt_model.step(&mut self.model.params, &grads)?;
        if let Some(p) = probe.as_deref_mut() {
            let after = Self::snapshot(&self.estimator.params);
            p.estimator_frozen_in_phase2 = est_before.as_deref() == Some(&after[..]);
        }
        self.step += 1;
        Ok(report)
    }
}
