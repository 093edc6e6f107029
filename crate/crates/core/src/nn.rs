//! Parameters, the forward context, and the layers shared by every model.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// A learnable tensor with a unique dotted name, e.g. `str.block0.W_Q`.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value: value.with_grad(),
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Non-learnable state saved with a model (batch-norm running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Anything that owns parameters.
pub trait Module<T: Scalar> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn visit_buffers(&self, _f: &mut dyn FnMut(&Buffer<T>)) {}
    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&mut Buffer<T>)) {}

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |p| names.push(p.name.clone()));
        names
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |p| p.grad = None);
    }

    /// Copies gradients recorded on a backward-consumed tape into the
    /// parameters. Parameters absent from the tape get a zero gradient.
    fn collect_grads(&mut self, tape: &Tape<T>) {
        let by_name: HashMap<&str, Var> = tape
            .params()
            .iter()
            .map(|(v, n)| (n.as_str(), *v))
            .collect();
        self.visit_params_mut(&mut |p| {
            let g = by_name
                .get(p.name.as_str())
                .and_then(|&v| tape.grad(v))
                .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
            p.grad = Some(g);
        });
    }

    /// Folds train-mode batch statistics into running estimates.
    fn apply_batch_stats(&mut self, stats: &[(String, BatchStats<T>)]) {
        if stats.is_empty() {
            return;
        }
        let by_name: HashMap<&str, &BatchStats<T>> =
            stats.iter().map(|(n, s)| (n.as_str(), s)).collect();
        let m = T::of(BATCH_NORM_MOMENTUM);
        self.visit_buffers_mut(&mut |b| {
            if let Some(prefix) = b.name.strip_suffix(".running_mean") {
                if let Some(s) = by_name.get(prefix) {
                    for (r, &x) in b.value.data_mut().iter_mut().zip(&s.mean) {
                        *r = (T::one() - m) * *r + m * x;
                    }
                }
            } else if let Some(prefix) = b.name.strip_suffix(".running_var") {
                if let Some(s) = by_name.get(prefix) {
                    let n = T::of(s.count as f64);
                    let unbias = n / (n - T::one());
                    for (r, &x) in b.value.data_mut().iter_mut().zip(&s.var) {
                        *r = (T::one() - m) * *r + m * x * unbias;
                    }
                }
            }
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward-pass state: the tape, the mode, dropout keys and collected
/// batch statistics.
pub struct Ctx<T> {
    pub tape: Tape<T>,
    pub mode: Mode,
    seed: u64,
    step: u64,
    param_vars: HashMap<String, Var>,
    batch_stats: Vec<(String, BatchStats<T>)>,
}

impl<T: Scalar> Ctx<T> {
    pub fn new(mode: Mode) -> Self {
        Self::with_seed(mode, 0, 0)
    }

    /// `seed` and `step` key the dropout masks of this pass.
    pub fn with_seed(mode: Mode, seed: u64, step: u64) -> Self {
        Self {
            tape: Tape::new(),
            mode,
            seed,
            step,
            param_vars: HashMap::new(),
            batch_stats: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Registers a parameter on the tape once; later uses share the var so
    /// gradients from shared weights accumulate.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        if let Some(&v) = self.param_vars.get(&p.name) {
            return v;
        }
        let v = self.tape.param(&p.name, &p.value);
        self.param_vars.insert(p.name.clone(), v);
        v
    }

    pub fn batch_stats(&self) -> &[(String, BatchStats<T>)] {
        &self.batch_stats
    }

    pub fn take_batch_stats(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.batch_stats)
    }

    /// Deterministic RNG for the dropout site `layer` in this pass.
    fn dropout_rng(&self, layer: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix(&[self.seed, self.step, fnv1a(layer)]))
    }

    /// Inverted dropout; identity (and not recorded) in eval mode or p = 0.
    pub fn dropout(&mut self, x: Var, p: f64, layer: &str) -> Result<Var> {
        if !self.is_train() || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout probability {p} must be < 1")));
        }
        let mut rng = self.dropout_rng(layer);
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.tape.value(x).len();
        let mask = (0..n)
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        self.tape.dropout(x, mask)
    }
}

/// FNV-1a, used to turn layer names into stable RNG stream keys.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer folded over several words.
pub fn mix(words: &[u64]) -> u64 {
    let mut acc: u64 = 0x9e37_79b9_7f4a_7c15;
    for &w in words {
        let mut z = acc ^ w.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        acc = z ^ (z >> 31);
    }
    acc
}

/// Parameter initializers.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Glorot-uniform `[fan_in, fan_out]` matrix.
    pub fn glorot<T: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn([fan_in, fan_out], |_| {
            T::of(self.rng.random_range(-a..a))
        })
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(shape.to_vec(), |_| {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            T::of(z * std)
        })
    }
}

/// `y = x W + b` applied to the trailing axis.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self::named(init, &format!("{name}.weight"), &format!("{name}.bias"), d_in, d_out, bias)
    }

    /// Linear layer with explicit weight and bias names.
    pub fn named(
        init: &mut Init,
        weight: &str,
        bias_name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        Self {
            weight: Param::new(weight, init.glorot(d_in, d_out)),
            bias: bias.then(|| Param::new(bias_name, Tensor::zeros([d_out]))),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight);
        let y = ctx.tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = ctx.param(b);
                ctx.tape.add_broadcast(y, b)
            }
            None => Ok(y),
        }
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(name: &str, d: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full([d], T::one())),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros([d])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let g = ctx.param(&self.gamma);
        let b = ctx.param(&self.beta);
        ctx.tape.layer_norm(x, g, b, T::of(LAYER_NORM_EPS))
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Batch normalization over `[batch, features]` with running statistics
/// for eval mode.
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub name: String,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: &str, d: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: Param::new(format!("{name}.gamma"), Tensor::full([d], T::one())),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros([d])),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: Tensor::zeros([d]),
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: Tensor::full([d], T::one()),
            },
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let g = ctx.param(&self.gamma);
        let b = ctx.param(&self.beta);
        let eps = T::of(BATCH_NORM_EPS);
        if ctx.is_train() {
            let (y, stats) = ctx.tape.batch_norm_train(x, g, b, eps)?;
            ctx.batch_stats.push((self.name.clone(), stats));
            Ok(y)
        } else {
            ctx.tape.batch_norm_eval(
                x,
                g,
                b,
                self.running_mean.value.data(),
                self.running_var.value.data(),
                eps,
            )
        }
    }
}

impl<T: Scalar> Module<T> for BatchNorm<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer<T>)) {
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer<T>)) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Scaled dot-product self-attention `softmax(Q Kᵀ / √d_k) V` over the
/// token axis of `x[N, L, d]`, without the output projection.
#[derive(Clone, Debug)]
pub struct SelfAttention<T> {
    pub w_q: Param<T>,
    pub w_k: Param<T>,
    pub w_v: Param<T>,
    pub heads: usize,
}

/// Attention output plus the `[N·heads, L, L]` attention map.
pub struct Attended {
    pub output: Var,
    pub weights: Var,
}

impl<T: Scalar> SelfAttention<T> {
    /// `suffix` distinguishes the temporal projections (`W_Q^t`).
    pub fn new(init: &mut Init, prefix: &str, suffix: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            w_q: Param::new(format!("{prefix}.W_Q{suffix}"), init.glorot(d, d)),
            w_k: Param::new(format!("{prefix}.W_K{suffix}"), init.glorot(d, d)),
            w_v: Param::new(format!("{prefix}.W_V{suffix}"), init.glorot(d, d)),
            heads,
        })
    }

    pub fn d_k(&self) -> usize {
        self.w_q.value.shape()[1] / self.heads
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Attended> {
        let (wq, wk, wv) = (ctx.param(&self.w_q), ctx.param(&self.w_k), ctx.param(&self.w_v));
        let q = ctx.tape.matmul(x, wq)?;
        let k = ctx.tape.matmul(x, wk)?;
        let v = ctx.tape.matmul(x, wv)?;
        let q = ctx.tape.split_heads(q, self.heads)?;
        let k = ctx.tape.split_heads(k, self.heads)?;
        let v = ctx.tape.split_heads(v, self.heads)?;
        let scores = ctx.tape.batch_matmul(q, k, true)?;
        let scale = T::one() / T::of(self.d_k() as f64).sqrt();
        let scores = ctx.tape.scale(scores, scale)?;
        let weights = ctx.tape.softmax(scores)?;
        let out = ctx.tape.batch_matmul(weights, v, false)?;
        let output = ctx.tape.merge_heads(out, self.heads)?;
        Ok(Attended { output, weights })
    }
}

impl<T: Scalar> Module<T> for SelfAttention<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.w_q);
        f(&self.w_k);
        f(&self.w_v);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.w_q);
        f(&mut self.w_k);
        f(&mut self.w_v);
    }
}

/// Pre-norm transformer cell:
/// `h = x + drop(W_O·attn(LN₁(x)))`, `y = h + drop(FFN(LN₂(h)))`.
#[derive(Clone, Debug)]
pub struct AttentionBlock<T> {
    pub prefix: String,
    pub ln1: LayerNorm<T>,
    pub attn: SelfAttention<T>,
    pub out: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
    pub dropout: f64,
}

/// Output of one block: new token states and the block's attention map.
pub struct BlockOutput {
    pub output: Var,
    pub weights: Var,
}

impl<T: Scalar> AttentionBlock<T> {
    pub fn new(
        init: &mut Init,
        prefix: &str,
        suffix: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(Self {
            prefix: prefix.to_string(),
            ln1: LayerNorm::new(&format!("{prefix}.ln1"), d),
            attn: SelfAttention::new(init, prefix, suffix, d, heads)?,
            out: Linear::named(init, &format!("{prefix}.W_O"), &format!("{prefix}.b_O"), d, d, true),
            ln2: LayerNorm::new(&format!("{prefix}.ln2"), d),
            ff1: Linear::new(init, &format!("{prefix}.ffn1"), d, d_ff, true),
            ff2: Linear::new(init, &format!("{prefix}.ffn2"), d_ff, d, true),
            dropout,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<BlockOutput> {
        let n1 = self.ln1.forward(ctx, x)?;
        let att = self.attn.forward(ctx, n1)?;
        let a = self.out.forward(ctx, att.output)?;
        let a = ctx.dropout(a, self.dropout, &format!("{}.attn_drop", self.prefix))?;
        let h = ctx.tape.add(x, a)?;
        let n2 = self.ln2.forward(ctx, h)?;
        let f = self.ff1.forward(ctx, n2)?;
        let f = ctx.tape.relu(f)?;
        let f = self.ff2.forward(ctx, f)?;
        let f = ctx.dropout(f, self.dropout, &format!("{}.ffn_drop", self.prefix))?;
        let output = ctx.tape.add(h, f)?;
        Ok(BlockOutput {
            output,
            weights: att.weights,
        })
    }
}

impl<T: Scalar> Module<T> for AttentionBlock<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.ln1.visit_params(f);
        self.attn.visit_params(f);
        self.out.visit_params(f);
        self.ln2.visit_params(f);
        self.ff1.visit_params(f);
        self.ff2.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.ln1.visit_params_mut(f);
        self.attn.visit_params_mut(f);
        self.out.visit_params_mut(f);
        self.ln2.visit_params_mut(f);
        self.ff1.visit_params_mut(f);
        self.ff2.visit_params_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_eval_is_identity() {
        let mut ctx = Ctx::<f64>::new(Mode::Eval);
        let x = ctx.tape.constant(Tensor::from_fn([4, 5], |i| i as f64 - 3.0));
        let y = ctx.dropout(x, 0.2, "site").unwrap();
        assert_eq!(ctx.tape.value(y).data(), ctx.tape.value(x).data());
    }

    #[test]
    fn dropout_masks_are_keyed_by_step_and_site() {
        let draw = |step, site: &str| {
            let mut ctx = Ctx::<f64>::with_seed(Mode::Train, 11, step);
            let x = ctx.tape.constant(Tensor::full([64], 1.0));
            let y = ctx.dropout(x, 0.5, site).unwrap();
            ctx.tape.value(y).data().to_vec()
        };
        assert_eq!(draw(3, "a"), draw(3, "a"));
        assert_ne!(draw(3, "a"), draw(4, "a"));
        assert_ne!(draw(3, "a"), draw(3, "b"));
        let kept = draw(3, "a");
        assert!(kept.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn shared_param_registers_once() {
        let mut ctx = Ctx::<f64>::new(Mode::Eval);
        let p = Param::new("w", Tensor::full([2], 1.0));
        let a = ctx.param(&p);
        let b = ctx.param(&p);
        assert_eq!(a, b);
        assert_eq!(ctx.tape.params().len(), 1);
    }

    #[test]
    fn linear_param_count() {
        let mut init = Init::new(0);
        let lin = Linear::<f64>::new(&mut init, "fc", 4, 3, true);
        assert_eq!(lin.num_params(), 15);
    }

    #[test]
    fn attention_heads_must_divide_width() {
        let mut init = Init::new(0);
        assert!(SelfAttention::<f64>::new(&mut init, "a", "", 6, 4).is_err());
        assert!(SelfAttention::<f64>::new(&mut init, "a", "", 8, 4).is_ok());
    }
}
