//! Spatial transformer (STR): self-attention across the joints of each
//! frame, then joint and temporal averaging.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::keypoints::NUM_JOINTS;
use crate::nn::{AttentionBlock, Ctx, Init, LayerNorm, Linear, Module, Param};
use crate::scalar::Scalar;

use super::StreamOutput;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Hidden width of each block's feed-forward layer.
    pub d_ff: usize,
    pub use_joint_embedding: bool,
    pub dropout_p: f64,
    pub n_classes: usize,
    pub n_joints: usize,
    pub in_channels: usize,
    pub seed: u64,
}

impl Default for StrConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 1,
            d_ff: 128,
            use_joint_embedding: true,
            dropout_p: 0.2,
            n_classes: 2,
            n_joints: NUM_JOINTS,
            in_channels: 2,
            seed: 0,
        }
    }
}

impl StrConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be >= 2".into()));
        }
        if self.n_joints == 0 || self.in_channels == 0 || self.d_ff == 0 {
            return Err(Error::Config("n_joints, in_channels and d_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StrModel<T> {
    pub config: StrConfig,
    pub input: Linear<T>,
    pub joint_embedding: Option<Param<T>>,
    pub blocks: Vec<AttentionBlock<T>>,
    pub final_norm: LayerNorm<T>,
    pub classifier: Linear<T>,
}

impl<T: Scalar> StrModel<T> {
    pub fn new(config: StrConfig) -> Result<Self> {
        let mut init = Init::new(config.seed);
        Self::with_init(config, &mut init, "str")
    }

    pub(crate) fn with_init(config: StrConfig, init: &mut Init, prefix: &str) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let input = Linear::new(init, &format!("{prefix}.input"), config.in_channels, d, true);
        let joint_embedding = config.use_joint_embedding.then(|| {
            Param::new(
                format!("{prefix}.joint_embedding"),
                init.normal(&[config.n_joints, d], 0.1),
            )
        });
        let blocks = (0..config.n_layers)
            .map(|i| {
                AttentionBlock::new(
                    init,
                    &format!("{prefix}.block{i}"),
                    "",
                    d,
                    config.n_heads,
                    config.d_ff,
                    config.dropout_p,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            final_norm: LayerNorm::new(&format!("{prefix}.norm"), d),
            classifier: Linear::new(init, &format!("{prefix}.classifier"), d, config.n_classes, true),
            config,
            input,
            joint_embedding,
            blocks,
        })
    }

    /// Embeds `x[B, T, V, C]` into `f_S[B, d]`, returning per-layer
    /// attention maps `[B·T·heads, V, V]` alongside.
    pub fn embed(&self, ctx: &mut Ctx<T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let s = ctx.tape.shape(x).to_vec();
        let &[b, t, v, c] = s.as_slice() else {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "STR input must be [batch, frames, joints, channels]".into(),
            });
        };
        if c != self.config.in_channels {
            return Err(Error::shape("str_forward", &s, &[self.config.in_channels]));
        }
        if self.joint_embedding.is_some() && v != self.config.n_joints {
            return Err(Error::shape("str_forward", &s, &[self.config.n_joints]));
        }
        let d = self.config.d_model;
        let tokens = ctx.tape.reshape(x, &[b * t, v, c])?;
        let mut h = self.input.forward(ctx, tokens)?;
        if let Some(e) = &self.joint_embedding {
            let e = ctx.param(e);
            h = ctx.tape.add_broadcast(h, e)?;
        }
        let mut maps = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let out = block.forward(ctx, h)?;
            h = out.output;
            maps.push(out.weights);
        }
        h = self.final_norm.forward(ctx, h)?;
        // joint average, then temporal average
        let per_frame = ctx.tape.mean_axis(h, 1)?;
        let per_frame = ctx.tape.reshape(per_frame, &[b, t, d])?;
        let f_s = ctx.tape.mean_axis(per_frame, 1)?;
        Ok((f_s, maps))
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<StreamOutput> {
        let (embedding, attention) = self.embed(ctx, x)?;
        let logits = self.classifier.forward(ctx, embedding)?;
        Ok(StreamOutput {
            logits,
            embedding,
            attention,
        })
    }
}

impl<T: Scalar> Module<T> for StrModel<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.input.visit_params(f);
        if let Some(e) = &self.joint_embedding {
            f(e);
        }
        for b in &self.blocks {
            b.visit_params(f);
        }
        self.final_norm.visit_params(f);
        self.classifier.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.input.visit_params_mut(f);
        if let Some(e) = &mut self.joint_embedding {
            f(e);
        }
        for b in &mut self.blocks {
            b.visit_params_mut(f);
        }
        self.final_norm.visit_params_mut(f);
        self.classifier.visit_params_mut(f);
    }
}
