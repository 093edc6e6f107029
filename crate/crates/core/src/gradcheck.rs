//! Central finite-difference verification of backward gradients.

use serde::Serialize;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::keypoints::NUM_JOINTS;
use crate::models::{LossWeights, ModelConfig, ModelKind, ModelOptions};
use crate::nn::{Ctx, Mode, Module};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the per-parameter max relative error.
    pub tolerance: f64,
    /// Denominator floor so near-zero gradients are judged absolutely.
    pub floor: f64,
    pub mode: Mode,
    /// Dropout key; masks are identical across all perturbed evaluations.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            mode: Mode::Eval,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub params: Vec<ParamCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backward gradients of `loss` with central differences for
/// every element of every parameter of `model`.
///
/// When a perturbation flips the sign of any ReLU input the difference
/// straddles a kink; the step is then shrunk tenfold, at most three times.
///
/// `setup` runs on each fresh tape before the forward pass; it is how
/// fault injection reaches the backward rules.
pub fn grad_check_with<M, L, S>(
    model: &mut M,
    loss: L,
    setup: S,
    config: GradCheckConfig,
) -> Result<GradCheckReport>
where
    M: Module<f64>,
    L: Fn(&M, &mut Ctx<f64>) -> Result<Var>,
    S: Fn(&mut Tape<f64>),
{
    let eval = |model: &M| -> Result<(f64, Vec<bool>)> {
        let mut ctx = Ctx::with_seed(config.mode, config.seed, 0);
        setup(&mut ctx.tape);
        let l = loss(model, &mut ctx)?;
        Ok((ctx.tape.value(l).item(), ctx.tape.relu_pattern()))
    };

    let mut ctx = Ctx::with_seed(config.mode, config.seed, 0);
    setup(&mut ctx.tape);
    let l = loss(model, &mut ctx)?;
    let pattern = ctx.tape.relu_pattern();
    ctx.tape.backward(l)?;
    model.collect_grads(&ctx.tape);

    let mut analytic = Vec::new();
    model.visit_params(&mut |p| {
        analytic.push((
            p.name.clone(),
            p.grad.as_ref().map(|g| g.data().to_vec()).unwrap_or_default(),
        ));
    });

    let mut params = Vec::with_capacity(analytic.len());
    for (name, grads) in analytic {
        let mut check = ParamCheck {
            name: name.clone(),
            numel: grads.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for (i, &a) in grads.iter().enumerate() {
            let orig = perturb(model, &name, i, None);
            let mut step = config.step;
            let numeric = loop {
                perturb(model, &name, i, Some(orig + step));
                let (plus, pp) = eval(model)?;
                perturb(model, &name, i, Some(orig - step));
                let (minus, pm) = eval(model)?;
                let smooth = pp == pattern && pm == pattern;
                if smooth || step <= config.step * 1e-3 {
                    break (plus - minus) / (2.0 * step);
                }
                step /= 10.0;
            };
            perturb(model, &name, i, Some(orig));
            let err = relative_error(a, numeric, config.floor);
            if err > check.max_rel_error || !err.is_finite() {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        check.passed = check.max_rel_error < config.tolerance;
        params.push(check);
    }
    let passed = params.iter().all(|p| p.passed);
    Ok(GradCheckReport {
        tolerance: config.tolerance,
        step: config.step,
        params,
        passed,
    })
}

/// [`grad_check_with`] without tape setup.
pub fn grad_check<M, L>(model: &mut M, loss: L, config: GradCheckConfig) -> Result<GradCheckReport>
where
    M: Module<f64>,
    L: Fn(&M, &mut Ctx<f64>) -> Result<Var>,
{
    grad_check_with(model, loss, |_| {}, config)
}

/// Reads element `i` of parameter `name`, optionally overwriting it.
fn perturb<M: Module<f64>>(model: &mut M, name: &str, i: usize, set: Option<f64>) -> f64 {
    let mut old = f64::NAN;
    model.visit_params_mut(&mut |p| {
        if p.name == name {
            old = p.value.data()[i];
            if let Some(v) = set {
                p.value.data_mut()[i] = v;
            }
        }
    });
    old
}

/// Small configuration of `kind` for model-level checks: d_model 8, one
/// head, four classes, no dropout.
pub fn tiny_options(kind: ModelKind, n_layers: usize) -> ModelOptions {
    ModelOptions {
        kind,
        n_classes: 4,
        d_model: 8,
        n_layers,
        n_heads: 1,
        d_ff: Some(16),
        dropout_p: 0.0,
        frames: TINY_FRAMES,
        seed: 11,
        ..ModelOptions::default()
    }
}

/// Frames of the inputs used by [`check_model`].
pub const TINY_FRAMES: usize = 10;

/// Gradient check of the full training loss of `config` in double
/// precision on a seeded random batch of `batch × frames × 133 × 2`.
pub fn check_model(config: &ModelConfig, batch: usize, frames: usize, gc: GradCheckConfig) -> Result<GradCheckReport> {
    let mut model = config.build::<f64>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    let channels = model.in_channels();
    let x = Tensor::from_fn([batch, frames, NUM_JOINTS, channels], |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        0.5 * z
    });
    let classes = model.n_classes();
    let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    grad_check(
        &mut model,
        |m, ctx| {
            let xv = ctx.tape.constant(x.clone());
            let out = m.forward(ctx, xv)?;
            Ok(m.loss(ctx, &out, &labels, LossWeights::default())?.total)
        },
        gc,
    )
}
