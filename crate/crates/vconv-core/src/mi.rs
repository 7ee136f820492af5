#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{init_uniform_fanin, Bound, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Log-variance soft clamp bound: heads output B·tanh(raw/B), keeping
/// densities inside the 64-bit exponent range while staying smooth.
const LOGVAR_BOUND: f64 = 10.0;

const LN_2PI: f64 = 1.8378770664093453;

/// Estimator topology and behavior switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiConfig {
    /// Content-code channels (per-frame vector scored by the bounds).
    pub content_dim: usize,
    /// Flattened speaker-condition length.
    pub speaker_dim: usize,
    /// Hidden width of both the conditional-density net and the
    /// statistics net.
    pub hidden: usize,
    /// Swaps which side of the contrastive ratio is scored positive,
    /// i.e. negates the upper-bound sample form. Off by default;
    /// exists only for comparison runs.
    pub swap_contrast: bool,
    /// Exponential-moving-average correction for the lower bound's
    /// marginal gradient (decay factor). Off by default: the standard
    /// biased gradient is fine at this scale.
    pub marginal_ema: Option<f64>,
    /// When false, the statistics net and the ordering hinge are cut
    /// out of the joint objective (lower-bound-free ablation).
    pub use_lower: bool,
}

impl MiConfig {
    pub fn new(content_dim: usize, speaker_dim: usize, hidden: usize) -> Self {
        MiConfig {
            content_dim,
            speaker_dim,
            hidden,
            swap_contrast: false,
            marginal_ema: None,
            use_lower: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.content_dim == 0 || self.speaker_dim == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig("estimator dims must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// The five scalars produced by one estimator step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiEstimates {
    pub upper: f64,
    pub lower: f64,
    pub q_nll: f64,
    pub t_loss: f64,
    pub gap_penalty: f64,
}

/// Outcome of `cmi_train_step`: `stepped` is false when a non-finite
/// loss made the optimizer skip the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiStepReport {
    pub estimates: MiEstimates,
    pub stepped: bool,
}

struct Linear {
    w: ParamId,
    b: ParamId,
}

struct Mlp {
    l1: Linear,
    l2: Linear,
}

struct EstimatorIds {
    q_mean: Mlp,
    q_logvar: Mlp,
    t_in: Linear,
    t_hidden: Linear,
    t_out: Linear,
}

/// Mutual-information estimator over (content frames, speaker code):
/// a diagonal-Gaussian conditional density for the contrastive upper
/// bound and a statistics network for the lower bound, trained
/// jointly with a bound-ordering hinge.
pub struct Estimator<T: Scalar> {
    pub config: MiConfig,
    pub params: ParamSet<T>,
    ids: EstimatorIds,
    /// Running mean of e^score under the shuffled pairing, when the
    /// EMA correction is enabled.
    ema: Option<T>,
}

impl<T: Scalar> Estimator<T> {
    pub fn new<R: Rng>(config: MiConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let lin = |params: &mut ParamSet<T>, rng: &mut R, name: &str, o: usize, i: usize| Linear {
            w: params.add(&format!("{name}.w"), init_uniform_fanin(&[o, i], i, rng)),
            b: params.add(&format!("{name}.b"), init_uniform_fanin(&[o], i, rng)),
        };
        let (dc, ds, h) = (config.content_dim, config.speaker_dim, config.hidden);
        let ids = EstimatorIds {
            q_mean: Mlp {
                l1: lin(&mut params, rng, "q.mean.1", h, ds),
                l2: lin(&mut params, rng, "q.mean.2", dc, h),
            },
            q_logvar: Mlp {
                l1: lin(&mut params, rng, "q.logvar.1", h, ds),
                l2: lin(&mut params, rng, "q.logvar.2", dc, h),
            },
            t_in: lin(&mut params, rng, "t.in", h, dc + ds),
            t_hidden: lin(&mut params, rng, "t.hidden", h, h),
            t_out: lin(&mut params, rng, "t.out", 1, h),
        };
        Ok(Estimator {
            config,
            params,
            ids,
            ema: None,
        })
    }

    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Bound {
        self.params.bind(graph, trainable)
    }

    fn linear(&self, g: &mut Graph<T>, bound: &Bound, l: &Linear, x: Var) -> Result<Var> {
        let h = g.matmul(bound.var(l.w), x)?;
        g.add_rows(h, bound.var(l.b))
    }

    fn lrelu(&self, g: &mut Graph<T>, x: Var) -> Var {
        g.leaky_relu(x, T::from_f64(0.2))
    }

    /// tanh composed from softplus/exp; exact identity 2σ(2u) − 1.
    fn tanh(&self, g: &mut Graph<T>, x: Var) -> Var {
        let two = T::from_f64(2.0);
        let n2 = g.affine(x, -two, T::zero());
        let sp = g.softplus(n2);
        let ns = g.neg(sp);
        let e = g.exp(ns);
        g.affine(e, two, -T::one())
    }

    /// Conditional-density heads: z_S [d_s × 1] → (μ, log-variance),
    /// each [d_c × 1], with the log-variance softly clamped.
    pub fn q_heads(&self, g: &mut Graph<T>, bound: &Bound, zs: Var) -> Result<(Var, Var)> {
        let h1 = self.linear(g, bound, &self.ids.q_mean.l1, zs)?;
        let h1 = self.lrelu(g, h1);
        let mu = self.linear(g, bound, &self.ids.q_mean.l2, h1)?;
        let h2 = self.linear(g, bound, &self.ids.q_logvar.l1, zs)?;
        let h2 = self.lrelu(g, h2);
        let raw = self.linear(g, bound, &self.ids.q_logvar.l2, h2)?;
        let b = T::from_f64(LOGVAR_BOUND);
        let u = g.affine(raw, T::one() / b, T::zero());
        let t = self.tanh(g, u);
        let logvar = g.affine(t, b, T::zero());
        Ok((mu, logvar))
    }

    /// Σ_l log Q(z_C[:, l] | μ, logvar) over a [d_c × L] frame map.
    fn log_prob_map(
        &self,
        g: &mut Graph<T>,
        zc: Var,
        mu: Var,
        logvar: Var,
    ) -> Result<Var> {
        let l = g.value(zc).shape()[1];
        let d = g.value(zc).shape()[0];
        let mu_b = g.broadcast_width(mu, l)?;
        let diff = g.sub(zc, mu_b)?;
        let sq = g.mul(diff, diff)?;
        let nlv = g.neg(logvar);
        let w = g.exp(nlv);
        let weighted = g.scale_rows(sq, w)?;
        let s_quad = g.sum_all(weighted);
        let s_lv = g.sum_all(logvar);
        let s_lv_l = g.affine(s_lv, T::from_usize(l), T::zero());
        let tot = g.add(s_quad, s_lv_l)?;
        let half = T::from_f64(-0.5);
        let shift = T::from_f64(-0.5 * (d * l) as f64 * LN_2PI);
        Ok(g.affine(tot, half, shift))
    }

    /// Statistics-net scores for every frame of one sample: [1 × L].
    fn frame_scores(&self, g: &mut Graph<T>, bound: &Bound, zc: Var, zs: Var) -> Result<Var> {
        let l = g.value(zc).shape()[1];
        let zs_b = g.broadcast_width(zs, l)?;
        let joined = g.concat_rows(&[zc, zs_b])?;
        let h = self.linear(g, bound, &self.ids.t_in, joined)?;
        let h = self.lrelu(g, h);
        let h = self.linear(g, bound, &self.ids.t_hidden, h)?;
        let h = self.lrelu(g, h);
        self.linear(g, bound, &self.ids.t_out, h)
    }

    fn batch_shapes(&self, g: &Graph<T>, zc: &[Var], zs: &[Var]) -> Result<(usize, usize)> {
        if zc.is_empty() || zc.len() != zs.len() {
            return Err(Error::ShapeMismatch(format!(
                "batch: {} frame maps vs {} conditions",
                zc.len(),
                zs.len()
            )));
        }
        let l = g.value(zc[0]).shape()[1];
        for &v in zc {
            let s = g.value(v).shape();
            if s != [self.config.content_dim, l] {
                return Err(Error::ShapeMismatch(format!(
                    "frame map {s:?}, expected [{} × {l}]",
                    self.config.content_dim
                )));
            }
        }
        for &v in zs {
            let s = g.value(v).shape();
            if s != [self.config.speaker_dim, 1] {
                return Err(Error::ShapeMismatch(format!(
                    "condition {s:?}, expected [{} × 1]",
                    self.config.speaker_dim
                )));
            }
        }
        Ok((zc.len(), l))
    }

    /// Positive-pair mean log-density and the contrastive upper bound
    /// over a batch. The cross-pair double sum is evaluated through
    /// its per-condition factorization Σ_m (z−μ)² = S2 − 2μS1 + NLμ²,
    /// which is the same quantity with O(N) instead of O(N²) graph
    /// nodes.
    pub fn contrast_terms(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        zc: &[Var],
        zs: &[Var],
    ) -> Result<ContrastTerms> {
        let (n, l) = self.batch_shapes(g, zc, zs)?;
        let d = self.config.content_dim;
        let nl = (n * l) as f64;

        // Batch moments over all samples and frames, per channel.
        let mut s1: Option<Var> = None;
        let mut s2: Option<Var> = None;
        for &z in zc {
            let m = g.mean_width(z)?;
            let rs = g.affine(m, T::from_usize(l), T::zero());
            s1 = Some(match s1 {
                Some(acc) => g.add(acc, rs)?,
                None => rs,
            });
            let zz = g.mul(z, z)?;
            let m2 = g.mean_width(zz)?;
            let rs2 = g.affine(m2, T::from_usize(l), T::zero());
            s2 = Some(match s2 {
                Some(acc) => g.add(acc, rs2)?,
                None => rs2,
            });
        }
        let (s1, s2) = (s1.unwrap(), s2.unwrap());

        let mut pos_sum: Option<Var> = None;
        let mut cross_sum: Option<Var> = None;
        for i in 0..n {
            let (mu, logvar) = self.q_heads(g, bound, zs[i])?;
            let lp = self.log_prob_map(g, zc[i], mu, logvar)?;
            pos_sum = Some(match pos_sum {
                Some(acc) => g.add(acc, lp)?,
                None => lp,
            });

            let w = {
                let nlv = g.neg(logvar);
                g.exp(nlv)
            };
            let mu_s1 = g.mul(mu, s1)?;
            let mu_s1 = g.affine(mu_s1, T::from_f64(-2.0), T::zero());
            let mu_sq = g.mul(mu, mu)?;
            let mu_sq = g.affine(mu_sq, T::from_f64(nl), T::zero());
            let quad = g.add(s2, mu_s1)?;
            let quad = g.add(quad, mu_sq)?;
            let wq = g.mul(w, quad)?;
            let s_quad = g.sum_all(wq);
            let s_lv = g.sum_all(logvar);
            let s_lv = g.affine(s_lv, T::from_f64(nl), T::zero());
            let tot = g.add(s_quad, s_lv)?;
            let c = g.affine(
                tot,
                T::from_f64(-0.5),
                T::from_f64(-0.5 * nl * d as f64 * LN_2PI),
            );
            cross_sum = Some(match cross_sum {
                Some(acc) => g.add(acc, c)?,
                None => c,
            });
        }
        let pos_sum = pos_sum.unwrap();
        let cross_sum = cross_sum.unwrap();

        let pos_mean = g.affine(pos_sum, T::from_f64(1.0 / nl), T::zero());
        let upper = if n == 1 {
            // Positive and marginal terms coincide; the bound is the
            // constant zero function of the inputs.
            g.constant(Tensor::scalar(T::zero()))
        } else {
            let cross_mean = g.affine(cross_sum, T::from_f64(1.0 / (nl * n as f64)), T::zero());
            g.sub(pos_mean, cross_mean)?
        };
        Ok(ContrastTerms { pos_mean, upper })
    }

    /// Upper-bound estimate on value-level batches (no gradients).
    pub fn club_upper(&self, zc: &[Tensor<T>], zs: &[Tensor<T>]) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let zc_v: Vec<Var> = zc.iter().map(|t| g.constant(t.clone())).collect();
        let zs_v: Vec<Var> = zs.iter().map(|t| g.constant(t.clone())).collect();
        let terms = self.contrast_terms(&mut g, &bound, &zc_v, &zs_v)?;
        Ok(g.value(terms.upper).item().to_f64())
    }

    /// Lower-bound pieces: joint-pair score mean and the logsumexp of
    /// scores under an in-batch shuffle of the conditions.
    fn mine_terms(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        zc: &[Var],
        zs: &[Var],
        shuffle_seed: u64,
    ) -> Result<MineTerms> {
        let (n, l) = self.batch_shapes(g, zc, zs)?;
        if n < 2 {
            return Err(Error::InvalidConfig(
                "lower bound needs a batch of at least 2".into(),
            ));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }

        let mut joint_sum: Option<Var> = None;
        let mut marg_rows: Vec<Var> = Vec::with_capacity(n);
        for i in 0..n {
            let sj = self.frame_scores(g, bound, zc[i], zs[i])?;
            let s = g.sum_all(sj);
            joint_sum = Some(match joint_sum {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
            marg_rows.push(self.frame_scores(g, bound, zc[i], zs[perm[i]])?);
        }
        let joint_mean = g.affine(joint_sum.unwrap(), T::from_f64(1.0 / (n * l) as f64), T::zero());
        let marg = g.concat_rows(&marg_rows)?;
        let lse = g.logsumexp(marg);
        // log of the mean: logsumexp − ln(N·L).
        let log_mean_exp = g.affine(lse, T::one(), T::from_f64(-((n * l) as f64).ln()));
        let lower = g.sub(joint_mean, log_mean_exp)?;
        Ok(MineTerms {
            joint_mean,
            marg_scores: marg,
            lower,
        })
    }

    /// Lower-bound estimate on value-level batches (no gradients).
    pub fn mine_lower(&self, zc: &[Tensor<T>], zs: &[Tensor<T>], shuffle_seed: u64) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let zc_v: Vec<Var> = zc.iter().map(|t| g.constant(t.clone())).collect();
        let zs_v: Vec<Var> = zs.iter().map(|t| g.constant(t.clone())).collect();
        let terms = self.mine_terms(&mut g, &bound, &zc_v, &zs_v, shuffle_seed)?;
        Ok(g.value(terms.lower).item().to_f64())
    }

    /// The loss the conversion model minimizes: the same sample form
    /// as the upper bound, built on caller-owned (gradient-carrying)
    /// code variables against frozen estimator parameters.
    pub fn mi_loss(
        &self,
        g: &mut Graph<T>,
        frozen: &Bound,
        zc: &[Var],
        zs: &[Var],
    ) -> Result<Var> {
        let terms = self.contrast_terms(g, frozen, zc, zs)?;
        if self.config.swap_contrast {
            Ok(g.neg(terms.upper))
        } else {
            Ok(terms.upper)
        }
    }

    /// One joint optimization step of both bounds on detached codes:
    /// minimizes positive-pair NLL, maximizes the lower bound, and
    /// hinges the ordering violation. Skips the parameter update (but
    /// still reports) if the loss is non-finite.
    pub fn cmi_train_step(
        &mut self,
        zc: &[Tensor<T>],
        zs: &[Tensor<T>],
        opt: &mut AdamState<T>,
        shuffle_seed: u64,
    ) -> Result<MiStepReport> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, true);
        let zc_v: Vec<Var> = zc.iter().map(|t| g.constant(t.clone())).collect();
        let zs_v: Vec<Var> = zs.iter().map(|t| g.constant(t.clone())).collect();

        let ct = self.contrast_terms(&mut g, &bound, &zc_v, &zs_v)?;
        let q_nll = g.neg(ct.pos_mean);

        if !self.config.use_lower {
            let total = q_nll;
            let estimates = MiEstimates {
                upper: g.value(ct.upper).item().to_f64(),
                lower: 0.0,
                q_nll: g.value(q_nll).item().to_f64(),
                t_loss: 0.0,
                gap_penalty: 0.0,
            };
            if !g.value(total).item().to_f64().is_finite() {
                return Ok(MiStepReport {
                    estimates,
                    stepped: false,
                });
            }
            g.backward(total)?;
            let grads = bound.grads(&g, &self.params);
            opt.step(&mut self.params, &grads)?;
            return Ok(MiStepReport {
                estimates,
                stepped: true,
            });
        }

        let mt = self.mine_terms(&mut g, &bound, &zc_v, &zs_v, shuffle_seed)?;
        let t_loss = match self.config.marginal_ema {
            None => g.neg(mt.lower),
            Some(decay) => {
                // Surrogate whose gradient is mean(e^s)/ema; the
                // reported bound still uses the stable logsumexp.
                let n_scores = g.value(mt.marg_scores).len();
                let es = g.exp(mt.marg_scores);
                let mean_es = g.mean_all(es);
                let mean_val = g.value(mean_es).item();
                let ema = match self.ema {
                    Some(prev) => {
                        T::from_f64(decay) * prev + (T::one() - T::from_f64(decay)) * mean_val
                    }
                    None => mean_val,
                };
                self.ema = Some(ema);
                let _ = n_scores;
                let scaled = g.affine(mean_es, T::one() / ema, T::zero());
                let nj = g.neg(mt.joint_mean);
                g.add(nj, scaled)?
            }
        };
        let viol = g.sub(mt.lower, ct.upper)?;
        let gap = g.leaky_relu(viol, T::zero());
        let qt = g.add(q_nll, t_loss)?;
        let total = g.add(qt, gap)?;

        let estimates = MiEstimates {
            upper: g.value(ct.upper).item().to_f64(),
            lower: g.value(mt.lower).item().to_f64(),
            q_nll: g.value(q_nll).item().to_f64(),
            t_loss: g.value(t_loss).item().to_f64(),
            gap_penalty: g.value(gap).item().to_f64(),
        };
        if !g.value(total).item().to_f64().is_finite() {
            return Ok(MiStepReport {
                estimates,
                stepped: false,
            });
        }
        g.backward(total)?;
        let grads = bound.grads(&g, &self.params);
        opt.step(&mut self.params, &grads)?;
        Ok(MiStepReport {
            estimates,
            stepped: true,
        })
    }

    /// Conditional mean and log-variance for one condition vector, as
    /// plain tensors (oracle/test convenience).
    pub fn q_condition(&self, zs: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let zs_v = g.constant(normalize_condition(zs, self.config.speaker_dim)?);
        let (mu, logvar) = self.q_heads(&mut g, &bound, zs_v)?;
        Ok((g.value(mu).clone(), g.value(logvar).clone()))
    }

    /// Log-density of one content frame under the conditional density
    /// for `zs` (no gradients).
    pub fn q_log_prob(&self, frame: &Tensor<T>, zs: &Tensor<T>) -> Result<f64> {
        let d = self.config.content_dim;
        if frame.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "frame has {} entries, content dim is {d}",
                frame.len()
            )));
        }
        let (mu, logvar) = self.q_condition(zs)?;
        Ok(gaussian_log_density(frame.data(), mu.data(), logvar.data()).to_f64())
    }
}

/// Handles returned by `contrast_terms`.
pub struct ContrastTerms {
    /// Mean over samples and frames of the positive-pair log-density.
    pub pos_mean: Var,
    /// The contrastive upper bound (positive minus cross-pair mean).
    pub upper: Var,
}

struct MineTerms {
    joint_mean: Var,
    marg_scores: Var,
    lower: Var,
}

/// Diagonal-Gaussian log-density with per-dimension log-variance.
pub fn gaussian_log_density<T: Scalar>(x: &[T], mu: &[T], logvar: &[T]) -> T {
    debug_assert_eq!(x.len(), mu.len());
    debug_assert_eq!(x.len(), logvar.len());
    let half = T::from_f64(0.5);
    let ln2pi = T::from_f64(LN_2PI);
    let mut acc = T::zero();
    for ((&xv, &mv), &lv) in x.iter().zip(mu).zip(logvar) {
        let d = xv - mv;
        acc = acc - half * (d * d * (-lv).exp() + lv + ln2pi);
    }
    acc
}

fn normalize_condition<T: Scalar>(zs: &Tensor<T>, d: usize) -> Result<Tensor<T>> {
    if zs.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "condition has {} entries, speaker dim is {d}",
            zs.len()
        )));
    }
    zs.reshape(&[d, 1])
}
