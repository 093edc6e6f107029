//! The spatial, temporal, multi-scale temporal and dual-stream models
//! behind one [`Model`] enum.

pub mod checkpoint;
pub mod fusion;
pub mod spatial;
pub mod temporal;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::Result;
use crate::nn::{Buffer, Ctx, Module, Param};
use crate::scalar::Scalar;

pub use fusion::{DualConfig, DualStreamModel, FusionHead, LossWeights, TemporalConfig};
pub use spatial::{StrConfig, StrModel};
pub use temporal::{MsTtrConfig, MsTtrModel, TtrConfig, TtrModel, MS_STRIDES};

/// What one stream produces.
pub struct StreamOutput {
    /// `[B, C]`
    pub logits: Var,
    /// Pooled embedding `[B, d_model]`.
    pub embedding: Var,
    /// Attention maps, one per block (per branch for MS-TTR).
    pub attention: Vec<Var>,
}

/// Which classifier produced a set of logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Spatial,
    Temporal,
    Fusion,
}

impl Head {
    pub fn label(self) -> &'static str {
        match self {
            Head::Spatial => "spatial",
            Head::Temporal => "temporal",
            Head::Fusion => "fusion",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Str,
    Ttr,
    Msttr,
    Dual,
}

impl ModelKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "str" => Some(Self::Str),
            "ttr" => Some(Self::Ttr),
            "msttr" => Some(Self::Msttr),
            "dual" => Some(Self::Dual),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Str => "str",
            Self::Ttr => "ttr",
            Self::Msttr => "msttr",
            Self::Dual => "dual",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelConfig {
    Str(StrConfig),
    Ttr(TtrConfig),
    Msttr(MsTtrConfig),
    Dual(DualConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Str(_) => ModelKind::Str,
            ModelConfig::Ttr(_) => ModelKind::Ttr,
            ModelConfig::Msttr(_) => ModelKind::Msttr,
            ModelConfig::Dual(_) => ModelKind::Dual,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            ModelConfig::Str(c) => c.n_classes,
            ModelConfig::Ttr(c) => c.n_classes,
            ModelConfig::Msttr(c) => c.n_classes(),
            ModelConfig::Dual(c) => c.n_classes(),
        }
    }

    pub fn build<T: Scalar>(&self) -> Result<Model<T>> {
        Ok(match self {
            ModelConfig::Str(c) => Model::Str(StrModel::new(c.clone())?),
            ModelConfig::Ttr(c) => Model::Ttr(TtrModel::new(c.clone())?),
            ModelConfig::Msttr(c) => Model::Msttr(MsTtrModel::new(c.clone())?),
            ModelConfig::Dual(c) => Model::Dual(DualStreamModel::new(c.clone())?),
        })
    }
}

#[derive(Clone, Debug)]
pub enum Model<T> {
    Str(StrModel<T>),
    Ttr(TtrModel<T>),
    Msttr(MsTtrModel<T>),
    Dual(DualStreamModel<T>),
}

/// Forward result of any model: logits per head, with the prediction head
/// listed last.
pub struct ModelOutput {
    pub heads: Vec<(Head, Var)>,
}

impl ModelOutput {
    /// Logits used for prediction: fusion for the dual model, the single
    /// stream head otherwise.
    pub fn prediction(&self) -> Var {
        self.heads.last().expect("at least one head").1
    }

    pub fn head(&self, head: Head) -> Option<Var> {
        self.heads.iter().find(|(h, _)| *h == head).map(|(_, v)| *v)
    }
}

/// Loss values of one forward pass.
pub struct LossOutput {
    pub total: Var,
    pub terms: Vec<(Head, Var)>,
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Str(m) => ModelConfig::Str(m.config.clone()),
            Model::Ttr(m) => ModelConfig::Ttr(m.config.clone()),
            Model::Msttr(m) => ModelConfig::Msttr(m.config.clone()),
            Model::Dual(m) => ModelConfig::Dual(m.config.clone()),
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.config().kind()
    }

    pub fn n_classes(&self) -> usize {
        self.config().n_classes()
    }

    /// Input channels per joint; 3 means the confidence channel is used.
    pub fn in_channels(&self) -> usize {
        match self {
            Model::Str(m) => m.config.in_channels,
            Model::Ttr(m) => m.config.in_channels,
            Model::Msttr(m) => m.config.branch.in_channels,
            Model::Dual(m) => m.config.spatial.in_channels,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<ModelOutput> {
        let heads = match self {
            Model::Str(m) => vec![(Head::Spatial, m.forward(ctx, x)?.logits)],
            Model::Ttr(m) => vec![(Head::Temporal, m.forward(ctx, x)?.logits)],
            Model::Msttr(m) => vec![(Head::Temporal, m.forward(ctx, x)?.logits)],
            Model::Dual(m) => {
                let out = m.forward(ctx, x)?;
                vec![
                    (Head::Spatial, out.spatial.logits),
                    (Head::Temporal, out.temporal.logits),
                    (Head::Fusion, out.fusion_logits),
                ]
            }
        };
        Ok(ModelOutput { heads })
    }

    /// Cross-entropy of every head; the dual model combines them with
    /// `weights`, single-stream models use their only term.
    pub fn loss(
        &self,
        ctx: &mut Ctx<T>,
        out: &ModelOutput,
        labels: &[usize],
        weights: LossWeights,
    ) -> Result<LossOutput> {
        match self {
            Model::Dual(_) => {
                let terms = fusion::total_loss(
                    ctx,
                    out.head(Head::Spatial).expect("spatial head"),
                    out.head(Head::Temporal).expect("temporal head"),
                    out.head(Head::Fusion).expect("fusion head"),
                    labels,
                    weights,
                )?;
                Ok(LossOutput {
                    total: terms.total,
                    terms: vec![
                        (Head::Spatial, terms.spatial),
                        (Head::Temporal, terms.temporal),
                        (Head::Fusion, terms.fusion),
                    ],
                })
            }
            _ => {
                let (head, logits) = out.heads[0];
                let l = ctx.tape.cross_entropy(logits, labels)?;
                Ok(LossOutput {
                    total: l,
                    terms: vec![(head, l)],
                })
            }
        }
    }
}

impl<T: Scalar> Module<T> for Model<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        match self {
            Model::Str(m) => m.visit_params(f),
            Model::Ttr(m) => m.visit_params(f),
            Model::Msttr(m) => m.visit_params(f),
            Model::Dual(m) => m.visit_params(f),
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Model::Str(m) => m.visit_params_mut(f),
            Model::Ttr(m) => m.visit_params_mut(f),
            Model::Msttr(m) => m.visit_params_mut(f),
            Model::Dual(m) => m.visit_params_mut(f),
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer<T>)) {
        if let Model::Dual(m) = self {
            m.visit_buffers(f);
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer<T>)) {
        if let Model::Dual(m) = self {
            m.visit_buffers_mut(f);
        }
    }
}

/// Index of the largest logit in each row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &[T], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Flat hyperparameters shared by every model kind; [`ModelOptions::config`]
/// turns them into a [`ModelConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub kind: ModelKind,
    pub n_classes: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Feed-forward width; `None` means `2 · d_model`.
    pub d_ff: Option<usize>,
    pub dropout_p: f64,
    /// Stride of a single-scale TTR.
    pub stride: usize,
    pub velocity: bool,
    pub positional: bool,
    pub joint_embedding: bool,
    /// Temporal stream of the dual model.
    pub dual_temporal: ModelKind,
    pub share_backbone: bool,
    pub residual: bool,
    pub frames: usize,
    pub in_channels: usize,
    pub seed: u64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            kind: ModelKind::Dual,
            n_classes: 2,
            d_model: 64,
            n_layers: 2,
            n_heads: 1,
            d_ff: None,
            dropout_p: 0.2,
            stride: 9,
            velocity: false,
            positional: true,
            joint_embedding: true,
            dual_temporal: ModelKind::Msttr,
            share_backbone: false,
            residual: false,
            frames: 30,
            in_channels: 2,
            seed: 0,
        }
    }
}

impl ModelOptions {
    fn ttr(&self) -> TtrConfig {
        TtrConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff.unwrap_or(2 * self.d_model),
            stride: self.stride,
            use_positional_encoding: self.positional,
            use_velocity_input: self.velocity,
            dropout_p: self.dropout_p,
            n_classes: self.n_classes,
            max_frames: self.frames,
            in_channels: self.in_channels,
            seed: self.seed,
        }
    }

    fn msttr(&self) -> MsTtrConfig {
        MsTtrConfig {
            branch: self.ttr(),
            share_backbone: self.share_backbone,
            residual: self.residual,
        }
    }

    fn str(&self) -> StrConfig {
        StrConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff.unwrap_or(2 * self.d_model),
            use_joint_embedding: self.joint_embedding,
            dropout_p: self.dropout_p,
            n_classes: self.n_classes,
            n_joints: crate::keypoints::NUM_JOINTS,
            in_channels: self.in_channels,
            seed: self.seed,
        }
    }

    pub fn config(&self) -> Result<ModelConfig> {
        let config = match self.kind {
            ModelKind::Str => ModelConfig::Str(self.str()),
            ModelKind::Ttr => ModelConfig::Ttr(self.ttr()),
            ModelKind::Msttr => ModelConfig::Msttr(self.msttr()),
            ModelKind::Dual => {
                let temporal = match self.dual_temporal {
                    ModelKind::Ttr => TemporalConfig::Ttr(self.ttr()),
                    ModelKind::Msttr => TemporalConfig::MsTtr(self.msttr()),
                    other => {
                        return Err(crate::error::Error::Config(format!(
                            "dual temporal stream must be ttr or msttr, not {}",
                            other.name()
                        )))
                    }
                };
                ModelConfig::Dual(DualConfig {
                    spatial: self.str(),
                    temporal,
                    dropout_p: self.dropout_p,
                    seed: self.seed,
                })
            }
        };
        config.validate()?;
        Ok(config)
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Str(c) => c.validate(),
            ModelConfig::Ttr(c) => c.validate(),
            ModelConfig::Msttr(c) => c.validate(),
            ModelConfig::Dual(c) => c.validate(),
        }
    }
}
