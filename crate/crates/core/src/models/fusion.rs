//! Feature-level fusion of the spatial and temporal embeddings.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Buffer, Ctx, Init, Linear, Module, Param};
use crate::scalar::Scalar;

use super::spatial::{StrConfig, StrModel};
use super::temporal::{MsTtrConfig, MsTtrModel, TtrConfig, TtrModel};
use super::StreamOutput;

/// Guard for normalizing a zero vector.
pub const L2_EPS: f64 = 1e-12;

/// `v / max(‖v‖₂, ε)`.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d = norm.max(L2_EPS);
    v.iter().map(|x| x / d).collect()
}

/// `[f_S ∥ f_T]`.
pub fn fuse(f_s: &[f64], f_t: &[f64]) -> Result<Vec<f64>> {
    if f_s.len() != f_t.len() {
        return Err(Error::shape("fuse", &[f_s.len()], &[f_t.len()]));
    }
    Ok(f_s.iter().chain(f_t).copied().collect())
}

/// Three-layer classifier over `f_fus ∈ R^{2d}`:
/// `h₁ = ReLU(BN(f W₁ + b₁))`, `h₂ = ReLU(BN(h₁' W₂ + b₂))`,
/// `ŷ = h₂' W₃ + b₃`, with dropout producing the primed activations.
#[derive(Clone, Debug)]
pub struct FusionHead<T> {
    pub w1: Linear<T>,
    pub bn1: BatchNorm<T>,
    pub w2: Linear<T>,
    pub bn2: BatchNorm<T>,
    pub w3: Linear<T>,
    pub dropout_p: f64,
}

/// Fusion activations, exposed for inspection.
pub struct FusionActivations {
    pub h1: Var,
    pub h1_dropped: Var,
    pub h2: Var,
    pub h2_dropped: Var,
    pub logits: Var,
}

impl<T: Scalar> FusionHead<T> {
    pub fn new(init: &mut Init, d: usize, n_classes: usize, dropout_p: f64) -> Self {
        let lin = |init: &mut Init, i: usize, a: usize, b: usize| {
            Linear::named(init, &format!("fusion.W_{i}"), &format!("fusion.b_{i}"), a, b, true)
        };
        Self {
            w1: lin(init, 1, 2 * d, 2 * d),
            bn1: BatchNorm::new("fusion.bn1", 2 * d),
            w2: lin(init, 2, 2 * d, d),
            bn2: BatchNorm::new("fusion.bn2", d),
            w3: lin(init, 3, d, n_classes),
            dropout_p,
        }
    }

    pub fn forward_detailed(&self, ctx: &mut Ctx<T>, f_fus: Var) -> Result<FusionActivations> {
        let width = ctx.tape.value(f_fus).last_dim();
        if width != self.w1.d_in() {
            return Err(Error::shape("fusion_forward", ctx.tape.shape(f_fus), &[self.w1.d_in()]));
        }
        let a1 = self.w1.forward(ctx, f_fus)?;
        let a1 = self.bn1.forward(ctx, a1)?;
        let h1 = ctx.tape.relu(a1)?;
        let h1_dropped = ctx.dropout(h1, self.dropout_p, "fusion.drop1")?;
        let a2 = self.w2.forward(ctx, h1_dropped)?;
        let a2 = self.bn2.forward(ctx, a2)?;
        let h2 = ctx.tape.relu(a2)?;
        let h2_dropped = ctx.dropout(h2, self.dropout_p, "fusion.drop2")?;
        let logits = self.w3.forward(ctx, h2_dropped)?;
        Ok(FusionActivations {
            h1,
            h1_dropped,
            h2,
            h2_dropped,
            logits,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, f_fus: Var) -> Result<Var> {
        Ok(self.forward_detailed(ctx, f_fus)?.logits)
    }
}

impl<T: Scalar> Module<T> for FusionHead<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.w1.visit_params(f);
        self.bn1.visit_params(f);
        self.w2.visit_params(f);
        self.bn2.visit_params(f);
        self.w3.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.w1.visit_params_mut(f);
        self.bn1.visit_params_mut(f);
        self.w2.visit_params_mut(f);
        self.bn2.visit_params_mut(f);
        self.w3.visit_params_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer<T>)) {
        self.bn1.visit_buffers(f);
        self.bn2.visit_buffers(f);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer<T>)) {
        self.bn1.visit_buffers_mut(f);
        self.bn2.visit_buffers_mut(f);
    }
}

/// Temporal stream of the dual model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemporalConfig {
    Ttr(TtrConfig),
    MsTtr(MsTtrConfig),
}

impl TemporalConfig {
    pub fn d_model(&self) -> usize {
        match self {
            TemporalConfig::Ttr(c) => c.d_model,
            TemporalConfig::MsTtr(c) => c.branch.d_model,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            TemporalConfig::Ttr(c) => c.n_classes,
            TemporalConfig::MsTtr(c) => c.branch.n_classes,
        }
    }
}

#[derive(Clone, Debug)]
pub enum TemporalStream<T> {
    Ttr(TtrModel<T>),
    MsTtr(MsTtrModel<T>),
}

impl<T: Scalar> TemporalStream<T> {
    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<StreamOutput> {
        match self {
            TemporalStream::Ttr(m) => m.forward(ctx, x),
            TemporalStream::MsTtr(m) => m.forward(ctx, x),
        }
    }
}

impl<T: Scalar> Module<T> for TemporalStream<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        match self {
            TemporalStream::Ttr(m) => m.visit_params(f),
            TemporalStream::MsTtr(m) => m.visit_params(f),
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            TemporalStream::Ttr(m) => m.visit_params_mut(f),
            TemporalStream::MsTtr(m) => m.visit_params_mut(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualConfig {
    pub spatial: StrConfig,
    pub temporal: TemporalConfig,
    /// Fusion-head dropout.
    pub dropout_p: f64,
    pub seed: u64,
}

impl DualConfig {
    pub fn d_model(&self) -> usize {
        self.spatial.d_model
    }

    pub fn n_classes(&self) -> usize {
        self.spatial.n_classes
    }

    pub fn validate(&self) -> Result<()> {
        self.spatial.validate()?;
        if self.spatial.d_model != self.temporal.d_model() {
            return Err(Error::Config(format!(
                "stream embedding widths differ: spatial {} vs temporal {}",
                self.spatial.d_model,
                self.temporal.d_model()
            )));
        }
        if self.spatial.n_classes != self.temporal.n_classes() {
            return Err(Error::Config("streams disagree on n_classes".into()));
        }
        Ok(())
    }
}

/// STR and TTR/MS-TTR streams with their own heads, plus the fusion head
/// over their L2-normalized embeddings.
#[derive(Clone, Debug)]
pub struct DualStreamModel<T> {
    pub config: DualConfig,
    pub spatial: StrModel<T>,
    pub temporal: TemporalStream<T>,
    pub fusion: FusionHead<T>,
}

pub struct DualOutput {
    pub spatial: StreamOutput,
    pub temporal: StreamOutput,
    /// `[B, 2d]` concatenation of the normalized embeddings.
    pub fused: Var,
    pub fusion_logits: Var,
}

impl<T: Scalar> DualStreamModel<T> {
    pub fn new(config: DualConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(config.seed);
        let spatial = StrModel::with_init(config.spatial.clone(), &mut init, "str")?;
        let temporal = match &config.temporal {
            TemporalConfig::Ttr(c) => TemporalStream::Ttr(TtrModel::with_init(c.clone(), &mut init, "ttr")?),
            TemporalConfig::MsTtr(c) => {
                TemporalStream::MsTtr(MsTtrModel::with_init(c.clone(), &mut init, "msttr")?)
            }
        };
        let fusion = FusionHead::new(&mut init, config.d_model(), config.n_classes(), config.dropout_p);
        Ok(Self {
            config,
            spatial,
            temporal,
            fusion,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<DualOutput> {
        let spatial = self.spatial.forward(ctx, x)?;
        let temporal = self.temporal.forward(ctx, x)?;
        let eps = T::of(L2_EPS);
        let f_s = ctx.tape.l2_normalize(spatial.embedding, eps)?;
        let f_t = ctx.tape.l2_normalize(temporal.embedding, eps)?;
        let fused = ctx.tape.concat(f_s, f_t)?;
        let fusion_logits = self.fusion.forward(ctx, fused)?;
        Ok(DualOutput {
            spatial,
            temporal,
            fused,
            fusion_logits,
        })
    }
}

impl<T: Scalar> Module<T> for DualStreamModel<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.spatial.visit_params(f);
        self.temporal.visit_params(f);
        self.fusion.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.spatial.visit_params_mut(f);
        self.temporal.visit_params_mut(f);
        self.fusion.visit_params_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer<T>)) {
        self.fusion.visit_buffers(f);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer<T>)) {
        self.fusion.visit_buffers_mut(f);
    }
}

/// Loss weights for `(L_STR, L_TTR, L_FUSION)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub spatial: f64,
    pub temporal: f64,
    pub fusion: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            spatial: 1.0,
            temporal: 1.0,
            fusion: 1.0,
        }
    }
}

/// Per-head cross-entropies and their weighted sum.
pub struct LossTerms {
    pub spatial: Var,
    pub temporal: Var,
    pub fusion: Var,
    pub total: Var,
}

/// `L_total = w_S·L_STR + w_T·L_TTR + w_F·L_FUSION`.
pub fn total_loss<T: Scalar>(
    ctx: &mut Ctx<T>,
    str_logits: Var,
    ttr_logits: Var,
    fusion_logits: Var,
    labels: &[usize],
    weights: LossWeights,
) -> Result<LossTerms> {
    let spatial = ctx.tape.cross_entropy(str_logits, labels)?;
    let temporal = ctx.tape.cross_entropy(ttr_logits, labels)?;
    let fusion = ctx.tape.cross_entropy(fusion_logits, labels)?;
    let mut total = None;
    for (term, w) in [
        (spatial, weights.spatial),
        (temporal, weights.temporal),
        (fusion, weights.fusion),
    ] {
        let weighted = if w == 1.0 { term } else { ctx.tape.scale(term, T::of(w))? };
        total = Some(match total {
            None => weighted,
            Some(acc) => ctx.tape.add(acc, weighted)?,
        });
    }
    Ok(LossTerms {
        spatial,
        temporal,
        fusion,
        total: total.expect("three terms"),
    })
}
