#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{init_head, init_uniform_fanin, Bound, ParamId, ParamSet};
use crate::scalar::Scalar;

/// Network topology. The kernel size is fixed at 3; everything else
/// is free, with defaults sized so the conversion path lands near the
/// intended ~1.3M-parameter budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input mel channels.
    pub n_mels: usize,
    /// Content-code channels (encoder output).
    pub content_channels: usize,
    /// Trunk width of the content encoder.
    pub enc_width: usize,
    /// Trunk width of the speaker encoder's conv stack.
    pub spk_width: usize,
    /// Width of the pooled speaker embedding (Siamese loss space).
    pub speaker_width: usize,
    /// Decoder trunk width; AdaIN statistics live per channel here.
    pub dec_width: usize,
    /// Dilation of each parallel branch in a pyramid block.
    pub apc_dilations: Vec<usize>,
    /// Branch kernel size; must be 3.
    pub apc_kernel: usize,
    /// Pyramid blocks in each encoder.
    pub encoder_depth: usize,
    /// Pyramid blocks in the decoder; one AdaIN layer follows each.
    pub decoder_depth: usize,
    /// Must equal decoder_depth (one (α, β) pair per decoder block).
    pub n_adain_layers: usize,
    /// Time-shuffle chunk length in frames.
    pub ts_chunk: usize,
    /// Variance stabilizer for IN / AdaIN.
    pub eps: f64,
    /// Negative slope of every activation.
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_mels: 80,
            content_channels: 64,
            enc_width: 64,
            spk_width: 64,
            speaker_width: 128,
            dec_width: 128,
            apc_dilations: alloc::vec![1, 2, 4, 8],
            apc_kernel: 3,
            encoder_depth: 3,
            decoder_depth: 4,
            n_adain_layers: 4,
            ts_chunk: 8,
            eps: 1e-5,
            leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    /// Small topology for fast tests; same code paths as the default.
    pub fn smoke() -> Self {
        ModelConfig {
            n_mels: 20,
            content_channels: 16,
            enc_width: 16,
            spk_width: 16,
            speaker_width: 32,
            dec_width: 32,
            apc_dilations: alloc::vec![1, 2, 4],
            apc_kernel: 3,
            encoder_depth: 2,
            decoder_depth: 2,
            n_adain_layers: 2,
            ts_chunk: 4,
            eps: 1e-5,
            leaky_slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.apc_kernel != 3 {
            return Err(Error::InvalidConfig(format!(
                "apc_kernel must be 3, got {}",
                self.apc_kernel
            )));
        }
        if self.n_adain_layers != self.decoder_depth {
            return Err(Error::InvalidConfig(format!(
                "n_adain_layers ({}) must equal decoder_depth ({})",
                self.n_adain_layers, self.decoder_depth
            )));
        }
        if self.apc_dilations.is_empty() {
            return Err(Error::InvalidConfig("apc_dilations is empty".into()));
        }
        for (i, &d) in self.apc_dilations.iter().enumerate() {
            if d < 1 {
                return Err(Error::InvalidConfig("dilation must be ≥ 1".into()));
            }
            if self.apc_dilations[..i].contains(&d) {
                return Err(Error::InvalidConfig(format!("duplicate dilation {d}")));
            }
        }
        let any_zero = [
            self.n_mels,
            self.content_channels,
            self.enc_width,
            self.spk_width,
            self.speaker_width,
            self.dec_width,
            self.encoder_depth,
            self.decoder_depth,
            self.ts_chunk,
        ]
        .iter()
        .any(|&v| v == 0);
        if any_zero {
            return Err(Error::InvalidConfig("all sizes must be ≥ 1".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("eps must be > 0".into()));
        }
        Ok(())
    }

    /// Frames a single pyramid block needs to see at least one full
    /// kernel span at the largest dilation.
    pub fn min_frames(&self) -> usize {
        // Same-padding keeps short inputs legal; one frame suffices
        // formally, but the widest branch is degenerate below this.
        self.apc_dilations.iter().copied().max().unwrap_or(1) + 1
    }
}

/// Which of the two weight-shared Siamese encoders is being invoked.
/// They are the same function; the tag exists so call sites document
/// which branch of the training diagram they implement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiameseSide {
    Main,
    Sibling,
}

/// Graph handles of the per-layer AdaIN condition (α_l, β_l), each
/// shaped [dec_width × 1].
pub struct SpeakerCodeVars {
    pub alpha: Vec<Var>,
    pub beta: Vec<Var>,
}

struct ApcIds {
    branch_w: Vec<ParamId>,
    branch_b: Vec<ParamId>,
    proj_w: ParamId,
    proj_b: ParamId,
}

struct Projection {
    w: ParamId,
    b: ParamId,
}

struct ModelIds {
    enc_in: Projection,
    enc_blocks: Vec<ApcIds>,
    enc_out: Projection,
    spk_in: Projection,
    spk_blocks: Vec<ApcIds>,
    spk_embed: Projection,
    alpha_heads: Vec<Projection>,
    beta_heads: Vec<Projection>,
    dec_in: Projection,
    dec_blocks: Vec<ApcIds>,
    dec_out: Projection,
}

/// Parameter tally of the conversion path, per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub content_encoder: usize,
    pub speaker_encoder: usize,
    pub decoder: usize,
    pub total: usize,
}

/// The full disentangling network: content encoder, weight-shared
/// speaker encoder with AdaIN heads, and the decoder. Owns every
/// trainable tensor of the conversion path.
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    ids: ModelIds,
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let k = config.apc_kernel;

        let proj = |params: &mut ParamSet<T>,
                        rng: &mut R,
                        name: String,
                        out_c: usize,
                        in_c: usize|
         -> Projection {
            let w = params.add(&format!("{name}.w"), init_uniform_fanin(&[out_c, in_c], in_c, rng));
            let b = params.add(&format!("{name}.b"), init_uniform_fanin(&[out_c], in_c, rng));
            Projection { w, b }
        };
        let apc = |params: &mut ParamSet<T>,
                       rng: &mut R,
                       name: String,
                       width: usize|
         -> ApcIds {
            let mut branch_w = Vec::new();
            let mut branch_b = Vec::new();
            for &d in &config.apc_dilations {
                branch_w.push(params.add(
                    &format!("{name}.d{d}.w"),
                    init_uniform_fanin(&[width, width, k], width * k, rng),
                ));
                branch_b.push(params.add(
                    &format!("{name}.d{d}.b"),
                    init_uniform_fanin(&[width], width * k, rng),
                ));
            }
            let cat = width * config.apc_dilations.len();
            let proj_w = params.add(
                &format!("{name}.proj.w"),
                init_uniform_fanin(&[width, cat], cat, rng),
            );
            let proj_b = params.add(
                &format!("{name}.proj.b"),
                init_uniform_fanin(&[width], cat, rng),
            );
            ApcIds {
                branch_w,
                branch_b,
                proj_w,
                proj_b,
            }
        };

        let enc_in = proj(&mut params, rng, "enc.in".into(), config.enc_width, config.n_mels);
        let enc_blocks = (0..config.encoder_depth)
            .map(|i| apc(&mut params, rng, format!("enc.apc{i}"), config.enc_width))
            .collect();
        let enc_out = proj(
            &mut params,
            rng,
            "enc.out".into(),
            config.content_channels,
            config.enc_width,
        );

        let spk_in = proj(&mut params, rng, "spk.in".into(), config.spk_width, config.n_mels);
        let spk_blocks = (0..config.encoder_depth)
            .map(|i| apc(&mut params, rng, format!("spk.apc{i}"), config.spk_width))
            .collect();
        let spk_embed = proj(
            &mut params,
            rng,
            "spk.embed".into(),
            config.speaker_width,
            config.spk_width,
        );

        // AdaIN heads start near identity: α ≈ 0, β ≈ 1, so the early
        // decoder behaves like a plain autoencoder while the speaker
        // path finds its footing.
        let head_scale = 0.01 / (config.speaker_width as f64).sqrt();
        let mut alpha_heads = Vec::new();
        let mut beta_heads = Vec::new();
        for l in 0..config.n_adain_layers {
            let aw = params.add(
                &format!("spk.alpha{l}.w"),
                init_head(&[config.dec_width, config.speaker_width], head_scale, rng),
            );
            let ab = params.add(
                &format!("spk.alpha{l}.b"),
                crate::tensor::Tensor::zeros(&[config.dec_width]),
            );
            alpha_heads.push(Projection { w: aw, b: ab });
            let bw = params.add(
                &format!("spk.beta{l}.w"),
                init_head(&[config.dec_width, config.speaker_width], head_scale, rng),
            );
            let bb = params.add(
                &format!("spk.beta{l}.b"),
                crate::tensor::Tensor::full(&[config.dec_width], T::one()),
            );
            beta_heads.push(Projection { w: bw, b: bb });
        }

        let dec_in = proj(
            &mut params,
            rng,
            "dec.in".into(),
            config.dec_width,
            config.content_channels,
        );
        let dec_blocks = (0..config.decoder_depth)
            .map(|i| apc(&mut params, rng, format!("dec.apc{i}"), config.dec_width))
            .collect();
        let dec_out = proj(&mut params, rng, "dec.out".into(), config.n_mels, config.dec_width);

        Ok(Model {
            config,
            params,
            ids: ModelIds {
                enc_in,
                enc_blocks,
                enc_out,
                spk_in,
                spk_blocks,
                spk_embed,
                alpha_heads,
                beta_heads,
                dec_in,
                dec_blocks,
                dec_out,
            },
        })
    }

    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Bound {
        self.params.bind(graph, trainable)
    }

    fn slope(&self) -> T {
        T::from_f64(self.config.leaky_slope)
    }

    /// 1×1 convolution expressed as a matrix product plus bias.
    fn project(&self, g: &mut Graph<T>, bound: &Bound, p: &Projection, x: Var) -> Result<Var> {
        let h = g.matmul(bound.var(p.w), x)?;
        g.add_rows(h, bound.var(p.b))
    }

    /// Pyramid block: parallel dilated k=3 branches (same padding),
    /// activated, concatenated, projected back to the trunk width,
    /// plus the residual input.
    fn apc_block(&self, g: &mut Graph<T>, bound: &Bound, ids: &ApcIds, x: Var) -> Result<Var> {
        let mut branches = Vec::with_capacity(ids.branch_w.len());
        for (i, &d) in self.config.apc_dilations.iter().enumerate() {
            let c = g.conv1d(x, bound.var(ids.branch_w[i]), bound.var(ids.branch_b[i]), 1, d, d)?;
            branches.push(g.leaky_relu(c, self.slope()));
        }
        let cat = g.concat_rows(&branches)?;
        let projected = {
            let h = g.matmul(bound.var(ids.proj_w), cat)?;
            g.add_rows(h, bound.var(ids.proj_b))?
        };
        g.add(projected, x)
    }

    /// Mel [n_mels × T] → content code [content_channels × T]. Every
    /// block output is instance-normalized, which is what strips the
    /// per-utterance (speaker) statistics from this path.
    pub fn content_encode(&self, g: &mut Graph<T>, bound: &Bound, mel: Var) -> Result<Var> {
        let eps = T::from_f64(self.config.eps);
        let mut h = self.project(g, bound, &self.ids.enc_in, mel)?;
        for ids in &self.ids.enc_blocks {
            h = self.apc_block(g, bound, ids, h)?;
            let (n, _) = g.instance_norm(h, eps)?;
            h = g.leaky_relu(n, self.slope());
        }
        self.project(g, bound, &self.ids.enc_out, h)
    }

    /// Mel [n_mels × T] → (embedding [speaker_width × 1], per-layer
    /// AdaIN conditions). No normalization anywhere on this path; the
    /// statistics the content path erases are exactly what this path
    /// must carry. Both Siamese sides run this same function.
    pub fn speaker_encode(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        mel: Var,
        _side: SiameseSide,
    ) -> Result<(Var, SpeakerCodeVars)> {
        let mut h = self.project(g, bound, &self.ids.spk_in, mel)?;
        for ids in &self.ids.spk_blocks {
            h = self.apc_block(g, bound, ids, h)?;
            h = g.leaky_relu(h, self.slope());
        }
        let pooled = g.mean_width(h)?;
        let embed = self.project(g, bound, &self.ids.spk_embed, pooled)?;
        let code = self.speaker_code(g, bound, embed)?;
        Ok((embed, code))
    }

    /// Linear heads from the embedding to each decoder layer's (α, β).
    fn speaker_code(&self, g: &mut Graph<T>, bound: &Bound, embed: Var) -> Result<SpeakerCodeVars> {
        let mut alpha = Vec::with_capacity(self.ids.alpha_heads.len());
        let mut beta = Vec::with_capacity(self.ids.beta_heads.len());
        for (ah, bh) in self.ids.alpha_heads.iter().zip(&self.ids.beta_heads) {
            alpha.push(self.project(g, bound, ah, embed)?);
            beta.push(self.project(g, bound, bh, embed)?);
        }
        Ok(SpeakerCodeVars { alpha, beta })
    }

    /// Code [content_channels × T] + speaker condition → mel-shaped
    /// output [n_mels × T].
    pub fn decode(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        content: Var,
        code: &SpeakerCodeVars,
    ) -> Result<Var> {
        if code.alpha.len() != self.config.decoder_depth {
            return Err(Error::ShapeMismatch(format!(
                "decoder wants {} AdaIN conditions, got {}",
                self.config.decoder_depth,
                code.alpha.len()
            )));
        }
        let eps = T::from_f64(self.config.eps);
        let mut h = self.project(g, bound, &self.ids.dec_in, content)?;
        for (l, ids) in self.ids.dec_blocks.iter().enumerate() {
            h = self.apc_block(g, bound, ids, h)?;
            h = g.adain(h, code.alpha[l], code.beta[l], eps)?;
            h = g.leaky_relu(h, self.slope());
        }
        self.project(g, bound, &self.ids.dec_out, h)
    }

    /// Training-shape forward pass: the reconstruction consumes the
    /// content of `mel` and the speaker condition extracted from the
    /// time-shuffled `mel` (shuffle given as a frame permutation so
    /// sampling stays outside the graph).
    pub fn reconstruct(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        mel: Var,
        shuffle_perm: &[usize],
    ) -> Result<Var> {
        let content = self.content_encode(g, bound, mel)?;
        let shuffled = g.gather_cols(mel, shuffle_perm)?;
        let (_, code) = self.speaker_encode(g, bound, shuffled, SiameseSide::Main)?;
        self.decode(g, bound, content, &code)
    }

    /// Conversion-path parameter tally; the estimator networks are
    /// deliberately outside this count.
    pub fn param_breakdown(&self) -> ParamBreakdown {
        let count = |pred: &dyn Fn(&str) -> bool| -> usize {
            self.params
                .iter()
                .filter(|(_, name, _)| pred(name))
                .map(|(_, _, t)| t.len())
                .sum()
        };
        let content_encoder = count(&|n: &str| n.starts_with("enc."));
        let speaker_encoder = count(&|n: &str| n.starts_with("spk."));
        let decoder = count(&|n: &str| n.starts_with("dec."));
        ParamBreakdown {
            content_encoder,
            speaker_encoder,
            decoder,
            total: content_encoder + speaker_encoder + decoder,
        }
    }
}

/// 1 − cos(e1, e2) with ε-stabilized norms; zero vectors are safe and
/// the result stays in [0, 2] up to the stabilizer.
pub fn siamese_loss<T: Scalar>(g: &mut Graph<T>, e1: Var, e2: Var) -> Result<Var> {
    let tiny = T::from_f64(1e-12);
    let prod = g.mul(e1, e2)?;
    let dot = g.sum_all(prod);
    let sq1 = g.mul(e1, e1)?;
    let ss1 = g.sum_all(sq1);
    let ss1 = g.affine(ss1, T::one(), tiny);
    let n1 = g.sqrt(ss1);
    let sq2 = g.mul(e2, e2)?;
    let ss2 = g.sum_all(sq2);
    let ss2 = g.affine(ss2, T::one(), tiny);
    let n2 = g.sqrt(ss2);
    let denom = g.mul(n1, n2)?;
    let cos = g.div(dot, denom)?;
    Ok(g.affine(cos, -T::one(), T::one()))
}
