//! Temporal transformer (TTR) and its multi-scale variant (MS-TTR).
//!
//! Both subsample the frame axis with a stride (`X[::k]`), then run
//! self-attention over time independently for every joint.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::keypoints::strided_len;
use crate::nn::{AttentionBlock, Ctx, Init, LayerNorm, Linear, Module, Param};
use crate::scalar::Scalar;

use super::StreamOutput;

/// Branch strides of the multi-scale model.
pub const MS_STRIDES: [usize; 2] = [3, 5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtrConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Temporal stride `k`.
    pub stride: usize,
    pub use_positional_encoding: bool,
    /// Feed frame-to-frame differences instead of coordinates.
    pub use_velocity_input: bool,
    pub dropout_p: f64,
    pub n_classes: usize,
    /// Longest input sequence (frames before striding).
    pub max_frames: usize,
    pub in_channels: usize,
    pub seed: u64,
}

impl Default for TtrConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 1,
            d_ff: 128,
            stride: 9,
            use_positional_encoding: true,
            use_velocity_input: false,
            dropout_p: 0.2,
            n_classes: 2,
            max_frames: 30,
            in_channels: 2,
            seed: 0,
        }
    }
}

impl TtrConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride < 1 {
            return Err(Error::Config("stride k must be >= 1".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be >= 2".into()));
        }
        if self.max_frames < 1 + self.use_velocity_input as usize {
            return Err(Error::Config("max_frames too small".into()));
        }
        if self.in_channels == 0 || self.d_ff == 0 {
            return Err(Error::Config("in_channels and d_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    /// Frames entering the stride step for an input of `frames` frames.
    pub fn frames_after_velocity(&self, frames: usize) -> usize {
        if self.use_velocity_input {
            frames.saturating_sub(1)
        } else {
            frames
        }
    }

    /// Tokens attended over for an input of `frames` frames at stride `k`.
    pub fn tokens(&self, frames: usize, k: usize) -> usize {
        strided_len(self.frames_after_velocity(frames), k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsTtrConfig {
    /// Shared branch settings; `stride` is ignored (branches use 3 and 5).
    pub branch: TtrConfig,
    /// Use one set of backbone weights for both scales.
    pub share_backbone: bool,
    /// Add a projection of the pooled raw input to `f_T`.
    pub residual: bool,
}

impl Default for MsTtrConfig {
    fn default() -> Self {
        Self {
            branch: TtrConfig::default(),
            share_backbone: false,
            residual: false,
        }
    }
}

impl MsTtrConfig {
    pub fn validate(&self) -> Result<()> {
        self.branch.validate()
    }

    pub fn n_classes(&self) -> usize {
        self.branch.n_classes
    }
}

/// Stride + per-joint temporal attention stack + pooling; shared by TTR and
/// each MS-TTR branch.
#[derive(Clone, Debug)]
pub struct TemporalEncoder<T> {
    pub input: Linear<T>,
    pub positional: Option<Param<T>>,
    pub blocks: Vec<AttentionBlock<T>>,
    pub final_norm: LayerNorm<T>,
    pub use_velocity_input: bool,
    pub d_model: usize,
    pub in_channels: usize,
}

impl<T: Scalar> TemporalEncoder<T> {
    fn new(init: &mut Init, prefix: &str, cfg: &TtrConfig, max_tokens: usize) -> Result<Self> {
        let d = cfg.d_model;
        let input = Linear::new(init, &format!("{prefix}.input"), cfg.in_channels, d, true);
        let positional = cfg.use_positional_encoding.then(|| {
            Param::new(format!("{prefix}.positional"), init.normal(&[max_tokens, d], 0.1))
        });
        let blocks = (0..cfg.n_layers)
            .map(|i| {
                AttentionBlock::new(
                    init,
                    &format!("{prefix}.block{i}"),
                    "^t",
                    d,
                    cfg.n_heads,
                    cfg.d_ff,
                    cfg.dropout_p,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            input,
            positional,
            blocks,
            final_norm: LayerNorm::new(&format!("{prefix}.norm"), d),
            use_velocity_input: cfg.use_velocity_input,
            d_model: d,
            in_channels: cfg.in_channels,
        })
    }

    /// `x[B, T, V, C]` → `f[B, d]` using stride `k`; also returns the
    /// per-layer attention maps `[B·V·heads, T', T']`.
    pub fn encode(&self, ctx: &mut Ctx<T>, x: Var, k: usize) -> Result<(Var, Vec<Var>)> {
        let s = ctx.tape.shape(x).to_vec();
        let &[b, _, v, c] = s.as_slice() else {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "TTR input must be [batch, frames, joints, channels]".into(),
            });
        };
        if c != self.in_channels {
            return Err(Error::shape("ttr_forward", &s, &[self.in_channels]));
        }
        let mut x = x;
        if self.use_velocity_input {
            x = ctx.tape.temporal_diff(x)?;
        }
        let x = ctx.tape.stride_frames(x, k)?;
        let tokens = ctx.tape.shape(x)[1];
        let per_joint = ctx.tape.swap_axes12(x)?;
        let per_joint = ctx.tape.reshape(per_joint, &[b * v, tokens, c])?;
        let mut h = self.input.forward(ctx, per_joint)?;
        if let Some(p) = &self.positional {
            let avail = p.value.shape()[0];
            if tokens > avail {
                return Err(Error::shape("ttr_positional", &[tokens], &[avail]));
            }
            let p = ctx.param(p);
            let p = if tokens == avail {
                p
            } else {
                ctx.tape.narrow(p, tokens)?
            };
            h = ctx.tape.add_broadcast(h, p)?;
        }
        let mut maps = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let out = block.forward(ctx, h)?;
            h = out.output;
            maps.push(out.weights);
        }
        h = self.final_norm.forward(ctx, h)?;
        // temporal average, then joint average
        let per_joint = ctx.tape.mean_axis(h, 1)?;
        let per_joint = ctx.tape.reshape(per_joint, &[b, v, self.d_model])?;
        let f = ctx.tape.mean_axis(per_joint, 1)?;
        Ok((f, maps))
    }
}

impl<T: Scalar> Module<T> for TemporalEncoder<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.input.visit_params(f);
        if let Some(p) = &self.positional {
            f(p);
        }
        for b in &self.blocks {
            b.visit_params(f);
        }
        self.final_norm.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.input.visit_params_mut(f);
        if let Some(p) = &mut self.positional {
            f(p);
        }
        for b in &mut self.blocks {
            b.visit_params_mut(f);
        }
        self.final_norm.visit_params_mut(f);
    }
}

/// Single-scale temporal transformer.
#[derive(Clone, Debug)]
pub struct TtrModel<T> {
    pub config: TtrConfig,
    pub encoder: TemporalEncoder<T>,
    pub classifier: Linear<T>,
}

impl<T: Scalar> TtrModel<T> {
    pub fn new(config: TtrConfig) -> Result<Self> {
        let mut init = Init::new(config.seed);
        Self::with_init(config, &mut init, "ttr")
    }

    pub(crate) fn with_init(config: TtrConfig, init: &mut Init, prefix: &str) -> Result<Self> {
        config.validate()?;
        let max_tokens = config.tokens(config.max_frames, config.stride);
        let encoder = TemporalEncoder::new(init, prefix, &config, max_tokens)?;
        let classifier = Linear::new(
            init,
            &format!("{prefix}.classifier"),
            config.d_model,
            config.n_classes,
            true,
        );
        Ok(Self {
            config,
            encoder,
            classifier,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<StreamOutput> {
        let (embedding, attention) = self.encoder.encode(ctx, x, self.config.stride)?;
        let logits = self.classifier.forward(ctx, embedding)?;
        Ok(StreamOutput {
            logits,
            embedding,
            attention,
        })
    }
}

impl<T: Scalar> Module<T> for TtrModel<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.encoder.visit_params(f);
        self.classifier.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.encoder.visit_params_mut(f);
        self.classifier.visit_params_mut(f);
    }
}

/// Multi-scale temporal transformer: `Concat[TTR_3(X), TTR_5(X)]`
/// projected back to `d_model`.
#[derive(Clone, Debug)]
pub struct MsTtrModel<T> {
    pub config: MsTtrConfig,
    /// One encoder per stride, or a single shared encoder.
    pub branches: Vec<TemporalEncoder<T>>,
    pub projection: Linear<T>,
    pub residual: Option<Linear<T>>,
    pub classifier: Linear<T>,
}

/// Intermediate values of an MS-TTR forward pass.
pub struct MsTtrOutput {
    pub stream: StreamOutput,
    /// Per-branch embeddings, in stride order (3, 5).
    pub branch_embeddings: Vec<Var>,
    /// `[B, 2·d_model]` before projection.
    pub concatenated: Var,
}

impl<T: Scalar> MsTtrModel<T> {
    pub fn new(config: MsTtrConfig) -> Result<Self> {
        let mut init = Init::new(config.branch.seed);
        Self::with_init(config, &mut init, "msttr")
    }

    pub(crate) fn with_init(config: MsTtrConfig, init: &mut Init, prefix: &str) -> Result<Self> {
        config.validate()?;
        let b = &config.branch;
        let branches = if config.share_backbone {
            let max_tokens = b.tokens(b.max_frames, MS_STRIDES[0]);
            vec![TemporalEncoder::new(init, &format!("{prefix}.shared"), b, max_tokens)?]
        } else {
            MS_STRIDES
                .iter()
                .map(|&k| {
                    TemporalEncoder::new(init, &format!("{prefix}.k{k}"), b, b.tokens(b.max_frames, k))
                })
                .collect::<Result<Vec<_>>>()?
        };
        let d = b.d_model;
        let projection = Linear::new(init, &format!("{prefix}.projection"), 2 * d, d, true);
        let residual = config
            .residual
            .then(|| Linear::new(init, &format!("{prefix}.residual"), b.in_channels, d, true));
        let classifier = Linear::new(init, &format!("{prefix}.classifier"), d, b.n_classes, true);
        Ok(Self {
            config,
            branches,
            projection,
            residual,
            classifier,
        })
    }

    fn branch(&self, i: usize) -> &TemporalEncoder<T> {
        &self.branches[i.min(self.branches.len() - 1)]
    }

    pub fn forward_detailed(&self, ctx: &mut Ctx<T>, x: Var) -> Result<MsTtrOutput> {
        let mut embeddings = Vec::with_capacity(MS_STRIDES.len());
        let mut attention = Vec::new();
        for (i, &k) in MS_STRIDES.iter().enumerate() {
            let (f, maps) = self.branch(i).encode(ctx, x, k)?;
            embeddings.push(f);
            attention.extend(maps);
        }
        let concatenated = ctx.tape.concat(embeddings[0], embeddings[1])?;
        let mut f_t = self.projection.forward(ctx, concatenated)?;
        if let Some(res) = &self.residual {
            let s = ctx.tape.shape(x).to_vec();
            let flat = ctx.tape.reshape(x, &[s[0], s[1] * s[2], s[3]])?;
            let pooled = ctx.tape.mean_axis(flat, 1)?;
            let skip = res.forward(ctx, pooled)?;
            f_t = ctx.tape.add(f_t, skip)?;
        }
        let logits = self.classifier.forward(ctx, f_t)?;
        Ok(MsTtrOutput {
            stream: StreamOutput {
                logits,
                embedding: f_t,
                attention,
            },
            branch_embeddings: embeddings,
            concatenated,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<StreamOutput> {
        Ok(self.forward_detailed(ctx, x)?.stream)
    }
}

impl<T: Scalar> Module<T> for MsTtrModel<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        for b in &self.branches {
            b.visit_params(f);
        }
        self.projection.visit_params(f);
        if let Some(r) = &self.residual {
            r.visit_params(f);
        }
        self.classifier.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for b in &mut self.branches {
            b.visit_params_mut(f);
        }
        self.projection.visit_params_mut(f);
        if let Some(r) = &mut self.residual {
            r.visit_params_mut(f);
        }
        self.classifier.visit_params_mut(f);
    }
}
